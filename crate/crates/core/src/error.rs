use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter outside its mathematical domain.
    #[error("domain error in `{param}`: {reason}")]
    Domain { param: &'static str, reason: String },

    #[error("simulation produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error(
        "linear system is ill-conditioned (condition estimate {estimate:.3e}); \
         try a smaller regularization weight C or a larger kernel lengthscale"
    )]
    Conditioning { estimate: f64 },

    #[error("jump quadrature did not converge: {0}")]
    Convergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("operation not supported: {0}")]
    Unsupported(String),

    #[error("time budget of {limit_secs} s exceeded")]
    Timeout { limit_secs: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(param: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            param,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::Conditioning { .. }
                | Error::Convergence(_)
                | Error::DegenerateData(_)
                | Error::Timeout { .. }
        )
    }

    /// Short machine-readable tag used in experiment reports.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::NonFiniteState { .. } => "non_finite_state",
            Error::Parse { .. } => "parse",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Conditioning { .. } => "conditioning",
            Error::Convergence(_) => "convergence",
            Error::Config(_) => "config",
            Error::Unsupported(_) => "unsupported",
            Error::Timeout { .. } => "timeout",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}
