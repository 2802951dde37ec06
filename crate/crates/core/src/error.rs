use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulation, training, sampling and forecasting
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or input dimension is invalid. `field` is a
    /// dotted path into the configuration (e.g. `truth.dt`).
    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Integration produced a non-finite value or left the bounded region.
    #[error("integration blew up at step {step} (t = {time})")]
    Blowup { step: usize, time: f64 },

    /// A gradient evaluation produced a non-finite value.
    #[error("non-finite gradient: {0}")]
    Gradient(String),

    /// Training diverged (loss stayed above the divergence threshold).
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    /// A metric cannot be evaluated on the given inputs.
    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Blowup { .. } | Error::Gradient(_) | Error::Diverged { .. } | Error::Metric(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
