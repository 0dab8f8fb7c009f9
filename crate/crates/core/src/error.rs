use std::path::PathBuf;

use thiserror::Error;

use crate::solver::SolveStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("state diverged at step {step}")]
    Divergence { step: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver returned {status:?} after {iterations} iterations (kkt residual {kkt_residual:e})")]
    Solver {
        status: SolveStatus,
        iterations: usize,
        kkt_residual: f64,
    },

    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("every sample in the batch was skipped ({skipped} infeasible or failed solves)")]
    AllSkipped { skipped: usize },

    #[error("value fit rmse {rmse:e} exceeds the limit {max:e}")]
    ValueFit { rmse: f64, max: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_)
            | Error::Divergence { .. }
            | Error::NonConvergence { .. }
            | Error::Solver { .. }
            | Error::AllSkipped { .. }
            | Error::ValueFit { .. } => true,
            Error::Episode { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
