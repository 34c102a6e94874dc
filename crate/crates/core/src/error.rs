use thiserror::Error;

use crate::autodiff::ParamStore;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared while evaluating `op`.
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: String, detail: String },

    /// The differential-equation solver produced a non-finite latent state.
    #[error("solver produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },

    /// Training produced a non-finite loss; `last_good` holds the parameters
    /// from the last iteration whose loss was finite.
    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        last_good: Box<ParamStore>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
