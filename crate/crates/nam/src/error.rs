use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NamError>;

#[derive(Debug, Error)]
pub enum NamError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    /// Every view was masked out for a pair, so no attention support exists.
    #[error("no active view for the requested pair")]
    NoActiveView,

    #[error("label {0:?} is not in the vocabulary")]
    UnknownLabel(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NamError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        NamError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
