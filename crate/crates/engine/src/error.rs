use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: invalid attribute: {msg}")]
    InvalidAttr { op: &'static str, msg: String },

    #[error("unknown primitive `{0}`")]
    UnknownOp(String),

    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward root must hold exactly one element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("non-finite forward value: {0}")]
    NonFinite(f64),

    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),

    #[error("variables from different graphs cannot be combined")]
    ForeignVar,

    #[error("{op}: {msg}")]
    Custom { op: String, msg: String },
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;
