use engine::EngineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not a rotation (‖RᵀR − I‖∞ = {orth_error:e}, det = {det})")]
    NotRotation { orth_error: f64, det: f64 },
    #[error("degenerate configuration: {0}")]
    Degenerate(&'static str),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("loss component `{component}` is not finite ({value})")]
    NonFiniteLoss { component: &'static str, value: f64 },
    #[error("dataset error: {0}")]
    Data(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// True for rank-deficient solves, whether raised directly or from inside a graph.
    pub fn is_degenerate(&self) -> bool {
        match self {
            CoreError::Degenerate(_) => true,
            CoreError::Engine(EngineError::Custom { op, .. }) => op == crate::procrustes::OP_NAME,
            _ => false,
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io { path: path.display().to_string(), source }
}

impl From<CoreError> for EngineError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Engine(inner) => inner,
            other => EngineError::Custom { op: "kpose".into(), msg: other.to_string() },
        }
    }
}
