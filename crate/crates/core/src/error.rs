use std::io;

use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// The explicit EP integrator left its stable region.
    #[error("integrator instability: {0}")]
    Instability(String),

    /// An inner fixed-point loop ran out of iterations. The last iterate is
    /// kept so callers can inspect or fall back to it.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure {
        iterations: usize,
        residual: f64,
        last_alpha: f64,
        last_lambda: Vec<f64>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }

    /// Strips `AtStep` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
