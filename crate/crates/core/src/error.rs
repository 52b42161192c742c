use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite condition score at quadrature node {node}")]
    NonFiniteNode { node: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("training diverged at iteration {iter}")]
    Diverged {
        iter: usize,
        /// State before the failing iteration.
        checkpoint: Box<crate::trainer::Checkpoint>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
