use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward called twice on the same tape; re-run the forward pass")]
    AlreadyBackpropagated,

    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("function under gradient check is not deterministic")]
    NonDeterministic,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parameter `{name}`: expected shape {expected}, checkpoint has {actual}")]
    ParameterShape {
        name: String,
        expected: Shape,
        actual: Shape,
    },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
