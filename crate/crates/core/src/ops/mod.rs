//! Differentiable neural-network primitives.
//!
//! Each op has a plain forward kernel on [`Tensor`]s and a [`Tape`]
//! method that records it for reverse-mode differentiation.
//!
//! [`Tape`]: crate::tape::Tape
//! [`Tensor`]: crate::tensor::Tensor

pub mod activation;
pub mod conv;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod upsample;

pub use activation::{relu_forward, softmax_channels_forward};
pub use conv::{conv2d_forward, ConvParams};
pub use loss::{cross_entropy_map_forward, PROB_FLOOR};
pub use norm::{batch_norm_forward, BatchNormParams, BatchStats, BnMode};
pub use optim::{sgd_step, SgdConfig};
pub use pool::{avg_pool2d_forward, global_avg_pool_forward};
pub use upsample::bilinear_upsample_forward;
