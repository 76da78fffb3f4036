//! Differentiable tensor operations.

pub mod conv;
pub mod pointwise;
pub mod record;

pub use conv::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGrads, ConvParams};
pub use pointwise::{concat_channels, pointwise, Pointwise};
pub use record::{OpGrads, OpKind, OpRecord};
