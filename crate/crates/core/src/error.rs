use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("payload length mismatch: header declares {expected} values, payload holds {actual}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("non-finite value in channel {channel} at voxel ({x}, {y}, {z})")]
    NonFinite {
        channel: usize,
        x: usize,
        y: usize,
        z: usize,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no valid sample after {attempts} rejections: {reason}")]
    NoValidSample { attempts: usize, reason: String },
    #[error("empty mask")]
    EmptyMask,
    #[error("mixture component {0} collapsed")]
    CollapsedComponent(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown site: {0}")]
    UnknownSite(String),
    #[error("degenerate samples: {0}")]
    Degenerate(String),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("serialization error: {0}")]
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
