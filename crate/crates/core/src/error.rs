use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or flags that cannot describe a valid computation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value left the finite range, or a loss/gradient went non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A caller broke an API precondition (e.g. stepping without gradients).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{value} is outside the valid range {range}")]
    Range { value: f64, range: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config hash {found:016x} does not match run config {expected:016x}")]
    ConfigMismatch { found: u64, expected: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
