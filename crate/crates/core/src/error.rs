use std::path::PathBuf;

use thiserror::Error;

/// Errors produced while building or solving a verification problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{name} = {value} is out of range ({allowed})")]
    OutOfRange {
        name: &'static str,
        value: i64,
        allowed: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
