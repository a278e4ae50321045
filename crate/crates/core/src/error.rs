use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("unknown label code {0:?}")]
    UnknownLabel(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("missing file for record {id}: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("record {id}: sampling rate {manifest} Hz in manifest, {header} Hz in file header")]
    SampleRateMismatch { id: String, manifest: u32, header: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("operator {0} is not invertible")]
    NotInvertible(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
