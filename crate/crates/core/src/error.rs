use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid modulus {0}: must be at least 2")]
    InvalidModulus(usize),

    #[error("invalid training fraction {0}: must lie in (0, 1]")]
    InvalidFraction(f64),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {tensor}{}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    NumericOverflow {
        tensor: &'static str,
        epoch: Option<usize>,
    },

    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: &'static str,
    },

    #[error("ridge parameter must be positive, got eta = {0}")]
    RidgeRequired(f64),

    #[error("ridge system is numerically singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("fewer than two usable feature columns (above norm floor {floor:e})")]
    DegenerateFeatures { floor: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay diverged at epoch {epoch} (max abs diff {max_abs_diff:e})")]
    ReplayDivergence { epoch: usize, max_abs_diff: f64 },

    #[error("checkpoint checksum mismatch in {}", .0.display())]
    Checksum(PathBuf),

    #[error("{} is not a checkpoint file (bad magic bytes)", .0.display())]
    NotCheckpoint(PathBuf),

    #[error("malformed metrics log {}: {reason}", .path.display())]
    MetricsFormat { path: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("missing checkpoint epochs {missing:?} (available: {available:?})")]
    MissingCheckpoints {
        missing: Vec<usize>,
        available: Vec<usize>,
    },

    #[error("empty cell {0}: no records to aggregate")]
    MissingCell(String),

    #[error("I/O error on {}: {source}", .path.display())]
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
    /// Process exit code: 2 configuration, 3 numeric failure, 4 missing or
    /// unreadable artifact.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidModulus(_)
            | Error::InvalidFraction(_)
            | Error::Shape { .. }
            | Error::RidgeRequired(_)
            | Error::Config(_) => 2,
            Error::NumericOverflow { .. }
            | Error::UndefinedMetric { .. }
            | Error::Singular { .. }
            | Error::DegenerateFeatures { .. }
            | Error::ReplayDivergence { .. } => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        match self {
            Error::NumericOverflow { tensor, .. } => Error::NumericOverflow {
                tensor,
                epoch: Some(epoch),
            },
            other => other,
        }
    }
}
