use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty subgraph")]
    EmptySubgraph,

    #[error("index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("rank exceeds dimension: rank {rank} > {dim}")]
    RankExceedsDimension { rank: usize, dim: usize },

    #[error("degenerate embedding: row {0} has zero norm")]
    DegenerateEmbedding(usize),

    #[error("no clean samples")]
    NoCleanSamples,

    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("pair map maps class to itself ({0})")]
    PairMapFixedPoint(usize),

    #[error("non-homophilous config: {0}")]
    NonHomophilous(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for command-line callers: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigLine { .. }
            | Error::NonHomophilous(_)
            | Error::InvalidArgument(_)
            | Error::PairMapFixedPoint(_)
            | Error::RankExceedsDimension { .. } => 2,
            Error::Diverged(_) | Error::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
