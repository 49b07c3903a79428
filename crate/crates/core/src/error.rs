use thiserror::Error;

/// Errors produced anywhere in the reduced-order-modeling pipeline.
#[derive(Debug, Error)]
pub enum LasdiError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate parameter point {0:?}")]
    DuplicateParameter(Vec<f64>),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("Newton iteration failed at time step {step}: residual norm {residual:e} after {iterations} iterations")]
    NewtonDivergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("rank-deficient system (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("kernel matrix not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("latent ODE blew up at step {step}")]
    BlowUp { step: usize },

    #[error("{failed} of {total} sampled ODEs blew up")]
    SampleBlowUp { failed: usize, total: usize },

    #[error("no admissible candidate parameters")]
    EmptyCandidates,

    #[error("config error at line {line} ({key}): {message}")]
    Config {
        key: String,
        line: usize,
        message: String,
    },
}

impl LasdiError {
    /// True for failures that come from the numerics rather than the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            LasdiError::NewtonDivergence { .. }
                | LasdiError::RankDeficient { .. }
                | LasdiError::Singular(_)
                | LasdiError::NotPositiveDefinite { .. }
                | LasdiError::NonFinite(_)
                | LasdiError::BlowUp { .. }
                | LasdiError::SampleBlowUp { .. }
                | LasdiError::EmptyCandidates
        )
    }
}

pub type Result<T, E = LasdiError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LasdiError::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LasdiError::InvalidArgument(msg.into()))
}
