//! The STDC-Align segmentation network: backbone, aligned semantic path,
//! feature fusion, segmentation head, and the parameter store.

pub mod arch;
pub mod blocks;
pub mod config;
pub mod count;
pub mod forward;
pub mod params;

pub use blocks::{conv_bias, conv_bn_relu, ffm, seg_head, stdc_block};
pub use config::{parse_key_values, NetworkConfig, INPUT_DIVISOR};
pub use count::{count_params_flops, Accounting, LedgerRow};
pub use forward::{backbone_forward, forward_eval, stdc_align_forward, AlignNodes, ForwardOutput, StageMaps};
pub use params::{NetworkParams, Session};
