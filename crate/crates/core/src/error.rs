use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("placement exhausted after {attempts} rejections")]
    PlacementExhausted { attempts: usize },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate variance in correlation input")]
    DegenerateVariance,

    #[error("quadrature did not converge: {coarse} vs {fine}")]
    QuadratureFailure { coarse: f64, fine: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("bad image file {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
