//! Pure tensor kernels: forward functions and the adjoints used by the autodiff graph.

pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, conv_out_extent};
pub use elementwise::{add, affine, mul, pointwise, relu, sigmoid, sigmoid_scalar, Pointwise};
pub use layout::{channel_concat, crop, pad_bottom_right};
pub use norm::{batch_norm, batch_stats, BatchStats, BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::{avg_pool2x2, global_avg_pool};
pub use resize::bilinear_resize;
