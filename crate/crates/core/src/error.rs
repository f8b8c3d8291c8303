use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("store error: {0}")]
    Store(String),

    #[error("nothing to report: {0}")]
    Empty(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Label(_) => "label",
            Error::Mask(_) => "mask",
            Error::NonFinite(_) => "non-finite",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Integrity(_) => "integrity",
            Error::Plan(_) => "plan",
            Error::Metrics(_) => "metrics",
            Error::Store(_) => "store",
            Error::Empty(_) => "empty",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
