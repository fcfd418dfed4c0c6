use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("span bounds [{s}, {e}) invalid for sequence length {len}")]
    Bounds { s: usize, e: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown placement `{0}`")]
    UnknownPlacement(String),

    #[error("target token {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("missing saved activations: {0}")]
    MissingTape(&'static str),

    #[error("decode step requested before prefill")]
    DecodeBeforePrefill,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("budget must be positive")]
    NonPositiveBudget,

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
