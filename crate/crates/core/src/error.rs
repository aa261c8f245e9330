use thiserror::Error;

pub type Result<T> = std::result::Result<T, ChmcError>;

#[derive(Debug, Error)]
pub enum ChmcError {
    /// Invalid user-supplied configuration (bad names, schedule endpoints, ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition (dimension or length mismatch).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("particle diverged: {reason} (q = {q:?}, p = {p:?})")]
    Divergence { reason: String, q: Vec<f64>, p: Vec<f64> },

    #[error("gauge fit produced a non-finite loss at iteration {iteration}")]
    FitFailure { iteration: usize },

    #[error("least-squares oracle failed: {0}")]
    Oracle(String),

    #[error("all particle weights collapsed at step {step}")]
    WeightCollapse { step: usize },

    #[error("quadrature interval [{a}, {b}] too small: boundary density ratio {ratio:e}")]
    IntervalTooSmall { a: f64, b: f64, ratio: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ChmcError {
    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            ChmcError::Config(_) => "config",
            ChmcError::Contract(_) => "contract",
            ChmcError::Divergence { .. } => "divergence",
            ChmcError::FitFailure { .. } => "fit_failure",
            ChmcError::Oracle(_) => "oracle",
            ChmcError::WeightCollapse { .. } => "weight_collapse",
            ChmcError::IntervalTooSmall { .. } => "interval_too_small",
            ChmcError::Io(_) => "io",
            ChmcError::Json(_) => "json",
        }
    }
}
