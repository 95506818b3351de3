use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("node {0} is isolated; degree-normalized operators are undefined")]
    IsolatedNode(usize),

    #[error("width mismatch in {context}: expected {expected}, got {actual}")]
    WidthMismatch { context: String, expected: usize, actual: usize },

    #[error("derivative order {requested} exceeds supported maximum {max}")]
    OrderOverflow { requested: usize, max: usize },

    #[error("derivative arity k={0} is unsupported (expected 1 or 2)")]
    UnsupportedArity(usize),

    #[error("gradient tape error: {0}")]
    Tape(String),

    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn width(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::WidthMismatch { context: context.into(), expected, actual }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::OrderOverflow { .. } | Error::UnsupportedArity(_)
        )
    }
}
