use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("ordering error at row {row}: date {date} does not follow {previous}")]
    Ordering {
        row: usize,
        date: String,
        previous: String,
    },

    #[error("gap in series at row {row}: expected {expected}, found {found}")]
    Gap {
        row: usize,
        expected: String,
        found: String,
    },

    #[error("empty dataset: {n} steps cannot host a window of {needed}")]
    EmptyDataset { n: usize, needed: usize },

    #[error("empty split: {split} has {len} steps, a window needs {needed}")]
    EmptySplit {
        split: &'static str,
        len: usize,
        needed: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("power iteration did not converge after {iterations} iterations (last relative change {change:e})")]
    Estimation { iterations: usize, change: f64 },

    #[error("certification error: {0}")]
    Certification(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
