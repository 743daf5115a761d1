//! Numerical engine for the STDC-MA semantic segmentation network.
//!
//! Everything here is `no_std` (with `alloc`): dense rank-4 tensors in f64,
//! reverse-mode autodiff, deformable convolution, the feature selection and
//! alignment modules, the STDC-Align network, hierarchical multiscale
//! attention, synthetic data, metrics, and the training loop. File formats,
//! threads and the command line live in the `stdcma` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;

pub mod adam;
pub mod alignment;
pub mod attention;
pub mod autodiff;
pub mod dataset;
pub mod deform;
pub mod grad_suites;
pub mod gradcheck;
mod linalg;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Shape, Tensor};
