use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the dewarping library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("mesh generation failed: {0}")]
    Generation(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical or geometric kind (as opposed to
    /// bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::Geometry(_)
                | Error::Generation(_)
                | Error::MetricUndefined(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
