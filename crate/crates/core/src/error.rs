use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual history {history:?})")]
    NewtonNotConverged { iterations: usize, history: Vec<f64> },

    #[error("non-finite state detected at step {step} (t = {t})")]
    BlowUp { step: u64, t: f64 },

    #[error("ensemble member {member} failed: {source}")]
    EnsembleMember {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("problem too large for dense work: {size} unknowns (limit {limit})")]
    SizeGuard { size: usize, limit: usize },

    #[error("config error at line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("config error: {0}")]
    ConfigSemantic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
