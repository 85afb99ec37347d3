use thiserror::Error;

/// Errors produced by the laboratory.
#[derive(Debug, Error)]
pub enum LlbError {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two fields (or trajectories) live on different grids.
    #[error("grid mismatch: {left} vs {right} interior nodes")]
    GridMismatch { left: usize, right: usize },

    /// Dimensions of modes, steps or time grids do not agree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A system kind was integrated without one of its required inputs.
    #[error("missing required input: {0}")]
    MissingInput(&'static str),

    /// The integrator produced non-finite values or crossed the stability ceiling.
    #[error("numerical blow-up at step {step}: {reason}")]
    BlowUp { step: usize, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LlbError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LlbError::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, LlbError>;
