use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {0} is a special token and cannot be decoded to bytes")]
    SpecialTokenInOutput(u32),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("bad interpolation weights: {0}")]
    BadLambdas(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },

    #[error("bad response from backend: {0}")]
    BadResponse(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("every entry of the distribution is -inf")]
    AllNegInfinity,

    #[error("vector length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("negative prompt mode requires a negative prompt")]
    MissingNegativePrompt,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("distribution is not normalized (total mass {0})")]
    NotNormalized(f64),

    #[error("trace has no steps")]
    EmptyTrace,

    #[error("empty task set")]
    EmptyTaskSet,

    #[error("malformed record at line {line}: {reason}")]
    MalformedTaskFile { line: usize, reason: String },

    #[error("malformed CSV at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },

    #[error("invalid arguments: {0}")]
    InvalidArgs(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
