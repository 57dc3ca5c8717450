use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A zero-norm vector has no nearest embedding under cosine similarity.
    #[error("degenerate input at position {position}: zero-norm vector has no nearest token")]
    Degenerate { position: usize },

    #[error("token index {index} out of range for vocabulary of size {vocab_size} (position {position})")]
    TokenIndex {
        index: usize,
        vocab_size: usize,
        position: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("cholesky factorization failed after jitter escalation to {jitter:e}")]
    Cholesky { jitter: f64 },

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("oracle failed: {0}")]
    Oracle(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input rather than by the computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::TokenIndex { .. }
                | Error::Shape { .. }
                | Error::Format { .. }
                | Error::Io { .. }
        )
    }
}
