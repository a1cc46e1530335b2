//! Error type shared across the crate.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensors; names both shapes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Bad input data (tokens, corpora).
    #[error("data error: {0}")]
    Data(String),
    /// Serialized artifact (checkpoint, CSV) could not be understood.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
