use std::path::{Path, PathBuf};

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
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}:{line}: {source}")]
    JsonLine {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid sentinel config: {0}")]
    InvalidConfig(String),
    #[error("invalid pair: {0}")]
    InvalidPair(String),
    #[error("{field} contains reserved sentinel {sentinel:?}")]
    SentinelCollision {
        field: &'static str,
        sentinel: String,
    },
    #[error("no context span found")]
    MissingContext,
    #[error("{count} context spans found, expected one")]
    AmbiguousContext { count: usize },
    #[error("examples from more than one dataset: {0:?} and {1:?}")]
    MixedDatasets(String, String),
    #[error("max sequence length must be positive")]
    ZeroBudget,
    #[error("{docs} documents cannot fill {rounds} rounds")]
    InsufficientDocuments { docs: usize, rounds: usize },
    #[error("current text alone needs {tokens} tokens, budget is {budget}")]
    PromptTooLong { tokens: usize, budget: usize },
    #[error("round {round} has no successful prior outputs to chain from")]
    NoPriorOutputs { round: usize },
    #[error("round {round} is out of range for a {rounds}-round plan")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("backend: {0}")]
    Backend(String),
    #[error("cannot assemble an empty chain")]
    EmptyChain,
    #[error("chain element {index} has no pairs")]
    ChainWithoutPairs { index: usize },
    #[error("template {id:?} is missing slot {slot}")]
    TemplateSlotMissing { id: String, slot: &'static str },
    #[error("malformed template entry {index}: {reason}")]
    MalformedTemplate { index: usize, reason: String },
    #[error("invalid mix spec: {0}")]
    InvalidMixSpec(String),
    #[error("source {stream_id} unreadable: {reason}")]
    SourceUnreadable { stream_id: String, reason: String },
    #[error("text domain set is empty")]
    EmptyTextDomains,
    #[error("text and instruction domain sets are both empty")]
    EmptyUnion,
    #[error("stream {path} unreadable: {reason}")]
    StreamUnreadable { path: PathBuf, reason: String },
    #[error("invalid contamination settings: {0}")]
    InvalidContamConfig(String),
    #[error("config invalid:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("stored state in {dir} does not match this run: {reason}")]
    StaleState { dir: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Variant name, for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
            Error::JsonLine { .. } => "JsonLine",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidPair(_) => "InvalidPair",
            Error::SentinelCollision { .. } => "SentinelCollision",
            Error::MissingContext => "MissingContext",
            Error::AmbiguousContext { .. } => "AmbiguousContext",
            Error::MixedDatasets(..) => "MixedDatasets",
            Error::ZeroBudget => "ZeroBudget",
            Error::InsufficientDocuments { .. } => "InsufficientDocuments",
            Error::PromptTooLong { .. } => "PromptTooLong",
            Error::NoPriorOutputs { .. } => "NoPriorOutputs",
            Error::RoundOutOfRange { .. } => "RoundOutOfRange",
            Error::Backend(_) => "Backend",
            Error::EmptyChain => "EmptyChain",
            Error::ChainWithoutPairs { .. } => "ChainWithoutPairs",
            Error::TemplateSlotMissing { .. } => "TemplateSlotMissing",
            Error::MalformedTemplate { .. } => "MalformedTemplate",
            Error::InvalidMixSpec(_) => "InvalidMixSpec",
            Error::SourceUnreadable { .. } => "SourceUnreadable",
            Error::EmptyTextDomains => "EmptyTextDomains",
            Error::EmptyUnion => "EmptyUnion",
            Error::StreamUnreadable { .. } => "StreamUnreadable",
            Error::InvalidContamConfig(_) => "InvalidContamConfig",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::Stage { .. } => "Stage",
            Error::StaleState { .. } => "StaleState",
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
