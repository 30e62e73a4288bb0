use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel {index} has near-zero norm {norm:e}")]
    ZeroVector { index: usize, norm: f64 },

    #[error("no pixel carries class {0}")]
    EmptyClass(usize),

    #[error("class {0} is the only active class")]
    SingleClass(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no negative keys for class {0}")]
    EmptyNegatives(usize),

    #[error("every negative class of {0} has an empty key pool")]
    EmptyPool(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("every pixel in the batch is ignore-labelled")]
    AllIgnored,

    #[error("partition constraints cannot be met: {0}")]
    Unsatisfiable(String),

    #[error("invalid config `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
