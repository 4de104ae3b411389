use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid quad: {0}")]
    InvalidQuad(String),

    /// A covariance matrix whose determinant fell below the conditioning floor.
    #[error("ill-conditioned covariance (det = {det:e})")]
    Conditioning { det: f64 },

    #[error("invalid gaussian: {0}")]
    InvalidGaussian(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown class '{name}' at line {line}")]
    UnknownClass { name: String, line: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input data rather than configuration.
    pub fn is_parse(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownClass { .. }
                | Error::InvalidQuad(_)
                | Error::InvalidBox(_)
                | Error::Json(_)
        )
    }
}
