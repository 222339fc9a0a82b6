use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside the domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empirical prox did not converge after {iterations} iterations (residual {residual:e})")]
    ProxNonConvergence { iterations: usize, residual: f64 },

    #[error("potential construction failed: {0}")]
    Construction(String),

    #[error("operation not supported for this potential: {0}")]
    Unsupported(String),

    #[error("integration produced a non-finite state at time {time}")]
    Integration { time: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("semiderivative extrapolation did not settle (successive estimates differ by {0:e})")]
    Extrapolation(f64),

    #[error("Lyapunov renormalisation underflow at tau = {0}")]
    Underflow(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64, domain: impl Into<String>) -> Self {
        Error::Domain {
            what,
            value,
            domain: domain.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
