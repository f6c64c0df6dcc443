use thiserror::Error;

use crate::optim::TrainLog;
use crate::theory::FlowTrajectory;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid setup: corpus too small, malformed architecture string, bad schema.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call-site contract was violated (shapes, indices, tags, ranges).
    #[error("argument error: {0}")]
    Argument(String),

    /// NaN/Inf or a failed numerical procedure.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("training diverged at step {step}")]
    Diverged { step: usize, log: Box<TrainLog> },

    #[error("integrator failed at t={t}: {detail}")]
    Integrator {
        t: f64,
        detail: String,
        partial: Box<FlowTrajectory>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), detail: detail.into() }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
