use thiserror::Error;

/// Errors surfaced by loading, validation, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{path}:{line}: duplicate entity id `{id}`")]
    DuplicateEntity { path: String, line: usize, id: String },

    #[error("invalid entity `{id}`: {msg}")]
    InvalidEntity { id: String, msg: String },

    #[error("mention `{mention_id}`: {msg}")]
    InvalidMention { mention_id: String, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged (non-finite loss) at round {round}, step {step}")]
    Divergence { round: String, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("index file {path}: {msg}")]
    Index { path: String, msg: String },

    #[error("index was built by a different model (index checksum {index}, model checksum {model}); pass force to load anyway")]
    ChecksumMismatch { index: String, model: String },

    #[error("reranker input: {0}")]
    RerankInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.as_ref().display().to_string(), line, msg: msg.into() }
    }
}
