use thiserror::Error;

use crate::optimizer::OptTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Iteration produced non-finite values or blew past the residual guard.
    /// The partial trace up to the offending iterate is kept.
    #[error("iteration diverged at step {iteration}: residual {residual:e}")]
    Divergence {
        iteration: usize,
        residual: f64,
        trace: Box<OptTrace>,
    },

    #[error("degenerate pair: output difference norm {0:e} below threshold")]
    DegeneratePair(f64),

    /// The positive-cosine assumption behind the step-size bound does not hold
    /// on the sampled pairs.
    #[error("bound assumption violated: minimum cosine {beta_min} is not positive")]
    AssumptionViolated { beta_min: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}
