use thiserror::Error;

use crate::attention::LayerId;

/// Errors produced by the regulation library and the toy simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logit at head {head}, row {row}, column {col}")]
    NonFiniteLogit { head: usize, row: usize, col: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("optimization diverged at iteration {iter}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { iter: usize, loss: f64, initial: f64 },

    #[error("hook contract violated at step {step}, layer {layer}: {reason}")]
    HookContract {
        step: usize,
        layer: LayerId,
        reason: String,
    },

    #[error("layer {0} already has a registered hook")]
    DuplicateHook(LayerId),

    #[error("target position {position} is a padding token")]
    TargetIsPadding { position: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("missing record entry: {0}")]
    MissingRecord(String),

    #[error("score backend failure: {0}")]
    Backend(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
