use thiserror::Error;

pub type Result<T, E = DgmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DgmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("ill-conditioned {size}x{size} system ({reason}) after jitter {jitter:e}")]
    Conditioning {
        size: usize,
        jitter: f64,
        reason: String,
    },

    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("vector field domain error: {0}")]
    Domain(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("marginal sets are indexed differently: {0}")]
    IndexMismatch(String),

    #[error("unknown parameter segment `{0}`")]
    UnknownSegment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
