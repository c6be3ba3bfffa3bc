use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PktError>;

#[derive(Debug, Error)]
pub enum PktError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank {rank} out of range 1..={max}")]
    Rank { rank: usize, max: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("token {token} outside vocabulary of size {vocab}")]
    Token { token: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("similarity error: {0}")]
    Similarity(String),

    #[error("container error at `{field}`: {detail}")]
    Container { field: String, detail: String },

    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("missing artifact {}", .0.display())]
    Dependency(PathBuf),

    #[error("output directory locked: {}", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PktError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PktError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn container(field: impl Into<String>, detail: impl Into<String>) -> Self {
        PktError::Container { field: field.into(), detail: detail.into() }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            PktError::Shape { .. } => "shape",
            PktError::Rank { .. } => "rank",
            PktError::Dimension(_) => "dimension",
            PktError::Singular(_) => "singular",
            PktError::NonFinite(_) => "non_finite",
            PktError::Token { .. } => "token",
            PktError::SequenceLength { .. } => "sequence_length",
            PktError::Trace(_) => "trace",
            PktError::Index(_) => "index",
            PktError::Data(_) => "data",
            PktError::Plan(_) => "plan",
            PktError::Protocol(_) => "protocol",
            PktError::Similarity(_) => "similarity",
            PktError::Container { .. } => "container",
            PktError::Config { .. } => "config",
            PktError::Dependency(_) => "dependency",
            PktError::Locked(_) => "locked",
            PktError::Io(_) => "io",
            PktError::Json(_) => "json",
        }
    }
}
