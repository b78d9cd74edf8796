use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum MlaError {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Weights, selections and configs disagree with each other.
    #[error("configuration error: {0}")]
    Config(String),

    /// An iterative routine failed to converge.
    #[error("numerical failure: {message} (residual {residual:.3e})")]
    Numerical { message: String, residual: f64 },

    /// Checkpoint file is malformed; `field` names the violated header field.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// Cache and decoding position are out of step.
    #[error("state error: {0}")]
    State(String),

    /// Training diverged.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MlaError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        MlaError::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MlaError::Config(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        MlaError::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MlaError>;
