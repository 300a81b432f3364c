//! Crate-wide error type. Variants mirror the failure classes of each
//! subsystem so tests can assert on the exact kind.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("patch error: {0}")]
    Patch(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty batch: {0}")]
    Batch(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("vote error: {0}")]
    Vote(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("model state error: {0}")]
    State(String),

    #[error("corrupt archive at byte {offset}: {reason}")]
    CorruptArchive { offset: u64, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
