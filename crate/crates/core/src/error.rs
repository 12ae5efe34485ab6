use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("singular matrix")]
    Singular,
    #[error("point maps to infinity")]
    PointAtInfinity,
    #[error("degenerate corner configuration after {0} attempts")]
    DegenerateCorners(usize),
    #[error("correspondence sampling failed: accepted {accepted} of {requested} after {attempts} attempts (acceptance rate {rate:.4})")]
    SamplingFailed {
        requested: usize,
        accepted: usize,
        attempts: usize,
        rate: f64,
    },
    #[error("pixel ({u}, {v}) outside {width}x{height}")]
    OutOfBounds {
        u: i64,
        v: i64,
        width: usize,
        height: usize,
    },
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("stale cache: {0}")]
    StaleCache(&'static str),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed:#x})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
