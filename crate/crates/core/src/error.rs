use thiserror::Error;

/// Errors produced while fitting, evaluating, or sampling log-concave models.
#[derive(Debug, Error)]
pub enum Error {
    /// The points do not span a full-dimensional polytope.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An exponent exceeded the representable range.
    #[error("exponent {exponent} exceeds the overflow cap")]
    Overflow { exponent: f64 },

    #[error("objective callback failed: {0}")]
    CallbackFailure(String),

    /// Model file could not be parsed; `path` names the offending field.
    #[error("format error at `{path}`: {message}")]
    Format { path: String, message: String },

    #[error("integrand failed at {point:?}: {message}")]
    Integrand { point: Vec<f64>, message: String },

    #[error("point {0} has zero density under every mixture component")]
    OrphanPoint(usize),

    #[error("component {component} is degenerate: {reason}")]
    DegenerateComponent { component: usize, reason: String },

    #[error("all {0} EM restarts ended in degenerate solutions")]
    AllRestartsDegenerate(usize),

    #[error("bootstrap aborted: {failed} of {total} refits failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("unsupported dimension {0}")]
    UnsupportedDim(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
