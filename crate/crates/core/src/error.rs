use std::path::PathBuf;

use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("span [{begin}, {end}) is invalid for a reference of {len} tokens")]
    InvalidSpan { begin: usize, end: usize, len: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("token id {id} is out of range for a vocabulary of {size}")]
    InvalidToken { id: TokenId, size: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("no table row covers prefix {0:?}")]
    UncoveredPrefix(Vec<TokenId>),

    #[error("source {0:?} is not part of the table world")]
    UnknownSource(Vec<TokenId>),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("bridge i/o: {0}")]
    BridgeIo(String),

    #[error("bridge protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("bridge did not answer within {0:?}")]
    BridgeTimeout(std::time::Duration),

    #[error("strategy needs a marginal model but none was supplied")]
    MissingMarginal,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("beam size must be at least 1")]
    InvalidBeam,

    #[error("max length must be at least 1")]
    InvalidMaxLen,

    #[error("exhaustive search over {size}^{n_max} sequences exceeds the enumeration limit")]
    InstanceTooLarge { size: usize, n_max: usize },

    #[error("document {0:?} has no token labels")]
    MissingLabels(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("{failed} of {total} documents failed")]
    DocumentsFailed { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
