use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum AssimError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid covariance factor: {0}")]
    InvalidFactor(String),

    /// Factorization failed even at the top of the jitter ladder.
    #[error("matrix is not positive definite ({context}) after jitter up to {max_jitter:e}")]
    NotPositiveDefinite { context: String, max_jitter: f64 },

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// A propagated point or filter output became non-finite.
    #[error("divergence in {context} at theta = {theta:?}")]
    Divergence { context: String, theta: Vec<f64> },

    #[error("simulation blew up at step {step}")]
    BlowUp { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step} failed: {reason}")]
    StepFailure { step: usize, reason: String },

    #[error("particle collapse at step {step} (ess = {ess:.3})")]
    Collapse { step: usize, ess: f64 },

    #[error("chain stuck: no acceptance over {0} consecutive proposals")]
    StuckChain(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AssimError {
    /// True for failures caused by the numbers rather than the inputs' shape
    /// or the environment.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            AssimError::NotPositiveDefinite { .. }
                | AssimError::NumericalDegeneracy(_)
                | AssimError::Divergence { .. }
                | AssimError::BlowUp { .. }
                | AssimError::StepFailure { .. }
                | AssimError::Collapse { .. }
                | AssimError::StuckChain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, AssimError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(AssimError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
