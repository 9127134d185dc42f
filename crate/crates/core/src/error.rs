//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

/// Errors raised by the Engram toolkit.
#[derive(Debug, Error)]
pub enum EngramError {
    /// A configuration value violates one of its documented invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data failed validation (duplicate ids, non-finite values, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Two tensors or structures that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An index fell outside the range it addresses.
    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: u64, len: u64 },

    /// A retrieval plan does not match the tables it is applied to.
    #[error("plan/table mismatch: {0}")]
    PlanMismatch(String),

    /// A binary file could not be decoded.
    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    /// A statistic is undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngramError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EngramError::Config(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EngramError::Shape(msg.into()))
}
