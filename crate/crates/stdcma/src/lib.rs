//! Image formats, checkpoints, dataset directories and the `stdcma` command
//! line, on top of `stdcma-core`.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod netpbm;
pub mod parallel;

pub use error::AppError;
