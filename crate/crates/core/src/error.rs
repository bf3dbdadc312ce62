use thiserror::Error;

use crate::protocol::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("quadrature did not converge: refinement changed the result by {delta:e}")]
    Precision { delta: f64 },

    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),

    #[error("node {node} timed out")]
    NodeTimeout { node: u16 },

    #[error("node {node} disconnected")]
    Disconnected { node: u16 },

    #[error("non-finite loss at round {round}: {detail}")]
    NonFinite { round: u32, detail: String },

    #[error("join rejected: {0}")]
    JoinRejected(String),

    #[error("unexpected message: {0}")]
    UnexpectedMessage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
