use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// A contract violation (non-scalar loss, missing grad, bad argument).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents (PGM/PPM headers, checkpoints, configs).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
