use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument is outside the domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Stateful component used before it was ready (e.g. batch-norm running statistics).
    #[error("state error: {0}")]
    State(String),

    /// Caller violated an operation's contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// A non-finite value was produced or observed.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("crop window for anchor ({row}, {col}) with side {size} exceeds image {height}x{width}")]
    Bounds {
        row: usize,
        col: usize,
        size: usize,
        height: usize,
        width: usize,
    },

    /// Synthetic label model could not realize the requested moments.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("manifest error in {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
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
