use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op} needs a batch of at least {min} rows, got {got}")]
    BatchSize { op: &'static str, got: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: truncated at byte {offset}: {msg}")]
    Truncated { path: String, offset: usize, msg: String },

    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by caller-supplied settings rather than data or I/O.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
