use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator, policies, dataset and model code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid action: storage id {storage} out of range (0..{n_storage})")]
    Action { storage: usize, n_storage: usize },

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("weight file error: {0}")]
    Weights(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown policy `{0}` (expected random|low|medium|high|sll|dt)")]
    UnknownPolicy(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
