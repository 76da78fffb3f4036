use std::fmt;

use crate::tensor::Shape;

/// Errors raised by tensor operations and the layers built on them.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: backward called before forward")]
    BackwardBeforeForward { op: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{op}: instance too large for the brute-force oracle ({detail})")]
    OracleTooLarge { op: &'static str, detail: String },
    #[error("{op}: index out of range ({detail})")]
    OutOfRange { op: &'static str, detail: String },
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(ParamDiff),
    #[error("non-finite loss {value} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, value: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Names present on one side of a parameter comparison but not the other.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamDiff {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub wrong_dims: Vec<String>,
}

impl ParamDiff {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.wrong_dims.is_empty()
    }
}

impl fmt::Display for ParamDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "missing=[{}] unexpected=[{}] wrong_dims=[{}]",
            self.missing.join(", "),
            self.unexpected.join(", "),
            self.wrong_dims.join(", ")
        )
    }
}
