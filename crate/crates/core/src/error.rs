use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: String, index: usize },

    #[error("backward already ran on this tape; reset it before running backward again")]
    BackwardTwice,

    #[error("{0}")]
    Invalid(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("finite-difference quotient is not finite for input {input}, coordinate {coord}")]
    GradCheck { input: usize, coord: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::Invalid(msg.to_string())
    }

    pub(crate) fn data(msg: impl fmt::Display) -> Self {
        Error::Data(msg.to_string())
    }
}
