use thiserror::Error;

pub type Result<T> = std::result::Result<T, MgccError>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum MgccError {
    /// Bad configuration (plugin selection, encoder dims, config file).
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape or width mismatch between tensors.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Index outside the valid range (token ids, gather indices).
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid input data (empty story, empty caption, bad image file).
    #[error("invalid input: {0}")]
    Input(String),

    /// A caller-facing contract was violated (mask sums, row counts).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Layout grammar failure, with the byte offset of the first bad token.
    #[error("layout parse error at byte {offset}: {message}")]
    LayoutParse { offset: usize, message: String },

    /// All grounding attempts exhausted; carries the last raw completion.
    #[error("grounding failed after {attempts} attempts; last completion: {last_completion:?}")]
    Grounding {
        attempts: usize,
        last_completion: String,
    },

    /// Completion client transport failure after retries.
    #[error("completion client error: {0}")]
    Client(String),

    /// Non-finite loss or other training failure.
    #[error("training error: {0}")]
    Training(String),

    /// Checkpoint save/load failure, naming the offending tensor when known.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for MgccError {
    fn from(e: serde_json::Error) -> Self {
        MgccError::Serde(e.to_string())
    }
}
