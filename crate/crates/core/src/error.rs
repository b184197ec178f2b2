use thiserror::Error;

pub type Result<T, E = EmaiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EmaiError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid action for agent {agent}: {detail}")]
    InvalidAction { agent: usize, detail: String },

    #[error("step called on a finished episode")]
    EpisodeDone,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Component combination that cannot work together (env/target mismatch,
    /// white-box explainer on a scripted target, ...).
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EmaiError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        EmaiError::InvalidArgument(msg.into())
    }

    pub fn incompatible(msg: impl Into<String>) -> Self {
        EmaiError::Incompatible(msg.into())
    }

    /// True for failures caused by NaN/Inf during numeric work.
    pub fn is_numeric(&self) -> bool {
        matches!(self, EmaiError::NonFinite(_))
    }
}
