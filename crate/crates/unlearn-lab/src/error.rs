//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Unified error type; variants map onto the CLI exit-code contract
/// (see [`LabError::exit_code`]).
#[derive(Debug, Error)]
pub enum LabError {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("target index {index} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("checkpoint lineage mismatch: {0}")]
    Lineage(String),

    #[error("degenerate gradient: norm {norm:.3e} below {min:.1e}")]
    DegenerateGradient { norm: f64, min: f64 },

    #[error("empty history passed to checkpoint selection")]
    EmptyHistory,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// Exit-code contract: 0 success, 1 usage, 2 IO, 3 data integrity,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::EmptyHistory => 1,
            LabError::Io { .. } | LabError::Json(_) => 2,
            LabError::CorruptCheckpoint { .. } => 3,
            LabError::NonFinite { .. }
            | LabError::Diverged { .. }
            | LabError::DegenerateGradient { .. } => 4,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
