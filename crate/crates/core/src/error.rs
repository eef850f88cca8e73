//! Crate-wide error type. Library code returns `Result`; panics are reserved
//! for internal logic errors that indicate a bug, never for bad user input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value violates a numeric contract (non-finite, out of range).
    #[error("value error: {0}")]
    Value(String),

    /// A configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Weight container is malformed or does not match the model.
    #[error("weights error: {0}")]
    Weights(String),

    /// A delimited table or box file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
