//! Multi-scale location-aware kernel representations for region-based
//! object detection, with the pieces needed to train and check a small
//! detector end to end.

pub mod archive;
pub mod boxes;
pub mod config;
pub mod detect;
pub mod error;
pub mod fusion;
pub mod head;
pub mod mlkp;
pub mod model;
pub mod oracle;
pub mod ops;
pub mod params;
pub mod roi;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mlkp::{MlkpConfig, MlkpParams};
pub use params::{ParamStore, Parameters};
pub use tensor::{Shape, Tensor};
