use thiserror::Error;

/// Errors raised by estimators, samplers and metrics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid time {0}: {1}")]
    InvalidTime(f64, &'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("reference bank has no {0} column")]
    MissingColumn(&'static str),

    #[error("all importance weights underflowed")]
    DegenerateWeights,

    #[error("effective sample size collapsed (sum of squared weights is 1)")]
    EssCollapse,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("operation unsupported for this kernel: {0}")]
    UnsupportedKernel(&'static str),

    #[error("non-finite score at particle {particle}, step {step} (t = {t})")]
    NonFiniteScore { particle: usize, step: usize, t: f64 },

    #[error("non-finite target density at the initial state")]
    NonFiniteTarget,

    #[error("no valid time points after ESS filtering")]
    NoValidTimePoints,

    #[error("zero MMD floor")]
    ZeroFloor,

    #[error("zero-norm clean observation")]
    ZeroObservation,

    #[error("bank format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
