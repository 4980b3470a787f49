use thiserror::Error;

use crate::mdp::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP:\n{0}")]
    InvalidMdp(ValidationReport),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown state `{0}`")]
    UnknownState(String),

    #[error("unknown action `{action}` at state `{state}`")]
    UnknownAction { state: String, action: String },

    #[error("horizon bound {0} exceeded while sampling")]
    HorizonExceeded(usize),

    #[error("policy shape does not match the MDP: {0}")]
    Shape(String),

    #[error("no KKT point found: {0}")]
    NoKktPoint(String),

    #[error("training diverged after {steps} steps (loss {loss:e}, grad norm {grad_norm:e})")]
    Diverged { steps: usize, loss: f64, grad_norm: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True when the error stems from malformed input rather than a failed run.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::InvalidMdp(_)
            | Error::Domain(_)
            | Error::UnknownState(_)
            | Error::UnknownAction { .. }
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Io(_) => true,
            Error::Iteration { source, .. } | Error::Stage { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
