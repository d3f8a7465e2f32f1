//! Error type shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing mandatory key `{0}`")]
    MissingField(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("unknown spec or case `{0}`")]
    UnknownSpec(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("invalid database: {0}")]
    InvalidDatabase(String),
    #[error("no profile for stage {stage} at {chips} chips, batch {batch}")]
    MissingProfile { stage: String, chips: u32, batch: u32 },
    #[error("iterative pipeline needs a simulation result for decode batch {decode_batch}, retrieval batch {retrieval_batch}")]
    MissingSimulation { decode_batch: u32, retrieval_batch: u32 },
    #[error("pipeline has no stages")]
    EmptyPipeline,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid iterative config: {0}")]
    InvalidIterConfig(String),
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("search space is empty under the given constraints")]
    EmptySpace,
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 for bad input, 3 for infeasible problems, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingField(_)
            | Error::UnknownKey(_)
            | Error::InvalidValue { .. }
            | Error::Parse(_)
            | Error::UnknownSpec(_)
            | Error::InvalidDatabase(_)
            | Error::InvalidSchedule(_)
            | Error::InvalidIterConfig(_)
            | Error::EmptyBatch
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Infeasible(_) | Error::InfeasibleBudget(_) | Error::EmptySpace => 3,
            Error::MissingProfile { .. }
            | Error::MissingSimulation { .. }
            | Error::EmptyPipeline
            | Error::EmptyInput => 4,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingField(_) => "MissingField",
            Error::UnknownKey(_) => "UnknownKey",
            Error::InvalidValue { .. } => "InvalidValue",
            Error::Parse(_) => "Parse",
            Error::UnknownSpec(_) => "UnknownSpec",
            Error::Infeasible(_) => "Infeasible",
            Error::EmptyBatch => "EmptyBatch",
            Error::InvalidDatabase(_) => "InvalidDatabase",
            Error::MissingProfile { .. } => "MissingProfile",
            Error::MissingSimulation { .. } => "MissingSimulation",
            Error::EmptyPipeline => "EmptyPipeline",
            Error::InvalidSchedule(_) => "InvalidSchedule",
            Error::InvalidIterConfig(_) => "InvalidIterConfig",
            Error::InfeasibleBudget(_) => "InfeasibleBudget",
            Error::EmptySpace => "EmptySpace",
            Error::EmptyInput => "EmptyInput",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
