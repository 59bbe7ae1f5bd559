use std::path::PathBuf;

/// Errors produced anywhere in the pruning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence length {len} outside the supported range [2, {max}]")]
    SequenceLength { len: usize, max: usize },

    #[error("group {0} does not belong to this model")]
    StaleGroup(usize),

    #[error("per-sample gradients are required but were not computed")]
    MissingPerSampleGradients,

    #[error("cannot aggregate an empty list of scores")]
    EmptyAggregation,

    #[error("importance report does not cover group {0}")]
    IncompleteReport(usize),

    #[error("pruning plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("calibration pool has {pool} samples but {k} calibration slots are required")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("rank {rank} is invalid for {target} with shape {rows}x{cols}")]
    InvalidRank {
        rank: usize,
        target: String,
        rows: usize,
        cols: usize,
    },

    #[error("adapter was already merged")]
    AdapterConsumed,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("non-finite loss encountered")]
    NonFiniteLoss,

    #[error("cannot resume search: {0}")]
    ResumeMismatch(String),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
