use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("missing column `{0}` in input header")]
    MissingColumn(String),

    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown level `{level}` for categorical column `{column}`")]
    UnknownLevel { column: String, level: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("sequence of length {len} too short for difference order {order}")]
    SequenceTooShort { len: usize, order: usize },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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
