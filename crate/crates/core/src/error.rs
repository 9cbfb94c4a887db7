use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("expected 3D volume, found {ndim}D payload in {path}")]
    NotThreeD { path: PathBuf, ndim: usize },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("unknown structure code {0}")]
    UnknownCode(i64),

    #[error("grid mismatch: expected {expected:?}, found {found:?}")]
    GridMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("preprocessing step `{step}` has no tool configured (pass --assume-preprocessed to skip external steps)")]
    ToolNotConfigured { step: String },

    #[error("preprocessing step `{step}` failed: {reason}")]
    ToolFailed { step: String, reason: String },

    #[error("window geometry: {0}")]
    Geometry(String),

    #[error("voxels not covered by any window center slice: bounding box {lo:?}..={hi:?} ({count} voxels)")]
    Uncovered {
        lo: [usize; 3],
        hi: [usize; 3],
        count: usize,
    },

    #[error("invalid network configuration: {0}")]
    Config(String),

    #[error("invalid loss input: {0}")]
    LossInput(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("degenerate differences: all paired differences equal a nonzero constant")]
    DegenerateDifferences,

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("invalid phantom spec: {0}")]
    Phantom(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
