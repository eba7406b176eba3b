use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of a function or distribution.
    #[error("domain error in {func}: {detail}")]
    Domain { func: &'static str, detail: String },

    /// A bound that is only defined for the two-dimensional (beta) case was
    /// asked to evaluate a K-dimensional component.
    #[error("{func} is only defined for K = 2, got K = {k}")]
    UnsupportedDimension { func: &'static str, k: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty dataset")]
    EmptyDataset,

    /// A structural invariant of a model object was violated.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("config error at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(func: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            func,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
