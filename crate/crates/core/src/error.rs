use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}, column {column}, field `{field}`: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },

    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("unknown object id {0}")]
    Lookup(u64),

    #[error("taxonomy mapping: {0}")]
    Mapping(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("scan pairing: {0}")]
    Pairing(String),

    #[error("generator: {0}")]
    Generator(String),

    #[error("training: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Taxonomy(_) => "taxonomy",
            Error::Lookup(_) => "lookup",
            Error::Mapping(_) => "mapping",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Graph(_) => "graph",
            Error::Pairing(_) => "pairing",
            Error::Generator(_) => "generator",
            Error::Training(_) => "training",
            Error::Checkpoint(_) => "checkpoint",
            Error::Evaluation(_) => "evaluation",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }
}
