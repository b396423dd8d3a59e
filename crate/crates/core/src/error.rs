use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid record: {message}")]
    InvalidRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid embedding sidecar {path}: {message}")]
    SidecarFormat { path: PathBuf, message: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch for {id:?}: expected {expected}, got {got}")]
    DimMismatch {
        expected: usize,
        got: usize,
        id: String,
    },
    #[error("non-finite embedding value for {0:?}")]
    NonFiniteEmbedding(String),
    #[error("zero embedding for {0:?}")]
    ZeroEmbedding(String),
    #[error("item {0:?} has no embedding")]
    MissingEmbedding(String),
    #[error("empty pool")]
    EmptyPool,
    #[error("empty text")]
    EmptyText,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("empty log-probability sequence")]
    EmptySequence,
    #[error("invalid log-probability at position {0}")]
    InvalidLogProb(usize),
    #[error("scorer failed on {id:?}: {cause}")]
    ScorerError { id: String, cause: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid score for {id:?}: {value}")]
    InvalidScore { id: String, value: f64 },
    #[error("method {0} requires uncertainty scores")]
    MissingScores(&'static str),

    #[error("lambda = 1 has no finite kernel weight; use perplexity top-k")]
    LambdaSingular,
    #[error("lambda {0} outside [0, 1]")]
    LambdaRange(f64),
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("pool embeddings are not normalized")]
    NotNormalized,

    #[error("budget must be at least 1")]
    BadBudget,
    #[error("kernel diagonal entry {0} is not positive")]
    BadKernel(usize),
    #[error("every remaining candidate has zero marginal gain")]
    RankExhausted,

    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("query {0:?} alone exceeds the token budget")]
    QueryTooLong(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
