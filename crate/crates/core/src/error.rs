use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sentence: {0}")]
    InvalidSentence(String),

    #[error("empty instance")]
    EmptyInstance,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dropout mask replay mismatch: {0}")]
    MaskReplay(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("instance {id}: {source}")]
    Instance {
        id: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format version {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
