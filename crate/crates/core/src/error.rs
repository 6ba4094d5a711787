use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OmniError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A logical mask is not uniform over its pooling groups.
    #[error("mask consistency error: {0}")]
    Consistency(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    /// Cache or bias state missing where the schedule requires it.
    #[error("state error: {0}")]
    State(String),

    /// An active query row had every key block skipped.
    #[error("policy violation: {0}")]
    PolicyViolation(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, OmniError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::OmniError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
