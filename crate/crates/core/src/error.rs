use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("record {index}: dimension mismatch, expected {expected} values, found {found}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("record {index}: non-finite value at position {position}")]
    NonFinite { index: usize, position: usize },

    #[error("record index {index} out of range (set holds {len} records)")]
    OutOfRange { index: usize, len: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("portion {portion}: {source}")]
    Portion {
        portion: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("train/test leakage: {count} shared example ids (first: {first})")]
    Leakage { count: usize, first: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
