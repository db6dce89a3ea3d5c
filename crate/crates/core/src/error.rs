use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("coil sensitivity energy vanishes at pixel (y={y}, x={x})")]
    ZeroCoilEnergy { y: usize, x: usize },

    #[error("input SNR is undefined for zero-energy measurements")]
    ZeroEnergy,

    #[error("iterate became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("training loss became non-finite at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("no training pairs available ({skipped} objects skipped with fewer than two acquisitions)")]
    InsufficientPairs { skipped: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short identifier for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidParameter { .. } => "invalid-parameter",
            Error::ZeroCoilEnergy { .. } => "zero-coil-energy",
            Error::ZeroEnergy => "zero-energy",
            Error::Diverged { .. } => "diverged",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::InsufficientPairs { .. } => "insufficient-pairs",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
