use std::path::PathBuf;

use thiserror::Error;

use crate::harness::expr::ParseError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {what} needs {requested}, budget is {budget}")]
    Capacity {
        what: &'static str,
        requested: u128,
        budget: u128,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error(
        "Picard iteration did not converge{}: residual {residual:e} after {iterations} iterations",
        .time_index.map(|i| format!(" at time index {i}")).unwrap_or_default()
    )]
    IterationFailure {
        time_index: Option<usize>,
        residual: f64,
        iterations: usize,
    },

    #[error("{0}")]
    Parse(#[from] ParseError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a time index to a Picard failure raised inside a single step.
    pub(crate) fn at_time(self, i: usize) -> Self {
        match self {
            Error::IterationFailure {
                residual,
                iterations,
                ..
            } => Error::IterationFailure {
                time_index: Some(i),
                residual,
                iterations,
            },
            Error::NumericalFailure(msg) => {
                Error::NumericalFailure(format!("time index {i}: {msg}"))
            }
            other => other,
        }
    }
}
