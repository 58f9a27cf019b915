//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is out of its documented range.
    #[error("argument error: {0}")]
    Argument(String),

    /// An operation was called in a state it does not support
    /// (e.g. backward twice, missing KV cache).
    #[error("state error: {0}")]
    State(String),

    /// A configuration file failed cross-validation.
    #[error("config error: {0}")]
    Config(String),

    /// NaN or Inf encountered where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
