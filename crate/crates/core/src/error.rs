use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-vocabulary parameter count {value:e} exceeds shape table coverage (max {max:e})")]
    OutOfRange { value: f64, max: f64 },

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("no data: {0}")]
    Empty(String),

    #[error("token id {id} is outside the unigram table support")]
    MissingToken { id: u32 },

    #[error("token id {id} is not below vocabulary size {vocab_size}")]
    TokenIndex { id: u32, vocab_size: usize },

    #[error("degenerate minimum: {0}")]
    Degenerate(String),

    #[error("optimizer did not converge from any start: {message}")]
    NonConvergence {
        message: String,
        /// Best parameters reached, if any start produced a finite objective.
        best: Option<Vec<f64>>,
    },

    #[error("record {run_id}: {reason}")]
    InvalidRecord { run_id: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of a numerical solver rather than of the inputs.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::NonConvergence { .. } | Error::Degenerate(_))
    }
}

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {value}")))
    }
}
