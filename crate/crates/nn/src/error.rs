use geopretrain_core::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Data(#[from] geopretrain_core::Error),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("input {height}x{width} is not a multiple of 32; pad to {padded_height}x{padded_width}")]
    InputNotAligned {
        height: usize,
        width: usize,
        padded_height: usize,
        padded_width: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}; last finite state kept")]
    NonFinite { step: usize },

    #[error("zero-norm vector in cosine similarity (dead head?)")]
    ZeroNorm,

    #[error("detector backend `{name}` is not registered; available: [{}]. Register it with BackendRegistry::register or pick one of the built-ins", .available.join(", "))]
    BackendMissing { name: String, available: Vec<String> },

    #[error("detector backend: {0}")]
    Backend(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
