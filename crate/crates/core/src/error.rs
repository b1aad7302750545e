use std::path::PathBuf;

use thiserror::Error;

use crate::store::Tier;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed {what}: {message}")]
    Malformed {
        line: usize,
        what: &'static str,
        message: String,
    },

    #[error("record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unknown image id {0:?}")]
    NotFound(String),

    #[error("unknown concept {0:?}")]
    UnknownConcept(String),

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("no candidate records in tier {tier} after filtering")]
    EmptyCandidates { tier: Tier },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("image {0:?} has no crop children")]
    NoCropChildren(String),

    #[error("pinned examples span several tiers ({0} and {1})")]
    MixedTiers(Tier, Tier),

    #[error("crop {crop:?} does not belong to base image {base:?}")]
    ForeignCrop { crop: String, base: String },

    #[error("image {0:?} is not a FULL-tier record")]
    NotFullTier(String),

    #[error("not enough labeled examples for {concept:?}: need {needed}, have {available}")]
    InsufficientExamples {
        concept: String,
        needed: usize,
        available: usize,
    },

    #[error("CAV training failed: {0}")]
    TrainingFailure(String),

    #[error("oracle intensity unavailable for record {id:?}, concept {concept:?}")]
    OracleUnavailable { id: String, concept: String },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("tool not applicable: {0}")]
    ToolInapplicable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidRecord {
            id: id.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input data rather than the environment.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
