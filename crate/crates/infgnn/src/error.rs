//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// On-disk layout is structurally wrong (missing manifest, bad header, bad payload length).
    #[error("format error: {0}")]
    Format(String),

    /// Data violates an invariant (asymmetric adjacency, NaN features, shape mismatch).
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A numerical step failed (non-finite gradient, singular system).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
