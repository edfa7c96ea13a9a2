//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or size mismatch in a tensor operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Halting scan stepped out of (timestep, block) order.
    #[error("sequencing error: expected position {expected:?}, got {got:?}")]
    Sequencing {
        expected: (usize, usize),
        got: (usize, usize),
    },

    /// Malformed data file; `offset` is the byte offset of the defect.
    #[error("format error: {detail} at offset {offset}")]
    Format { detail: String, offset: u64 },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure (NaN loss, violated hard invariant).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
