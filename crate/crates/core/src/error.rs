use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box {0}")]
    InvalidBox(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("unknown verb {0:?}")]
    UnknownVerb(String),
    #[error("unknown object category {0:?}")]
    UnknownObject(String),
    #[error("empty decoding mask")]
    EmptyMask,
    #[error("target token {token} ({word:?}) lies outside the verb token mask")]
    TargetOutsideMask { token: usize, word: String },
    #[error("loss component {0} is not finite")]
    NonFiniteLoss(&'static str),
    #[error("record {index}: {message}")]
    MalformedRecord { index: usize, message: String },
    #[error("rulebook gap: no rule covers the pair geometry {0}")]
    RulebookGap(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
