use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A corpus line could not be parsed or violates a pair invariant.
    #[error("{reason}, line {line}")]
    Line { line: usize, reason: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus is not labeled")]
    Unlabeled,

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("tokenizer: {0}")]
    Tokenize(String),

    #[error("query: {0}")]
    Query(String),

    #[error("model config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated tensor data")]
    TruncatedTensorData,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("protocol error (request {id}): {reason}")]
    Protocol { id: u64, reason: String },

    #[error("scorer: {0}")]
    Scorer(String),

    #[error("timed out waiting for response to request {id}")]
    Timeout { id: u64 },

    #[error("invalid training setup: {0}")]
    Train(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
