use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GazeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load metadata for subject `{subject}`: {reason}")]
    Metadata { subject: String, reason: String },

    #[error("image error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("subjects without a split label: {0:?}")]
    MissingSplitLabels(Vec<String>),

    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("unexpected image size: expected {expected}x{expected}, got {width}x{height}")]
    ImageSize {
        expected: u32,
        width: u32,
        height: u32,
    },

    #[error("shape mismatch in `{field}`: {reason}")]
    Shape { field: String, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error(
        "non-finite loss at epoch {epoch} step {step} (lr {lr:e}, grad norm {grad_norm:e}, batch {batch_ids:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norm: f64,
        batch_ids: Vec<String>,
    },

    #[error("unknown layer `{name}`; valid layers: {valid:?}")]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("unknown preset `{0}` (valid: 1-14)")]
    UnknownPreset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("model produced a non-finite prediction")]
    NonFinitePrediction,
}

impl GazeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GazeError::Io {
            path: path.into(),
            source,
        }
    }
}
