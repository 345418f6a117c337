use std::path::PathBuf;

/// Errors produced by the engine, the analyses and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("feature map pre-activation {magnitude:.3} exceeds the overflow bound {bound}")]
    FeatureOverflow { magnitude: f64, bound: f64 },

    #[error("linear attention denominator is {0:e}; state is empty or the feature map is not positive")]
    NonPositiveDenominator(f64),

    #[error("expected pair index {expected}, got {got}")]
    IndexDiscontinuity { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("distillation diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("malformed config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}
