use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was created without tracing; backward is unavailable")]
    NotTraced,

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("empty or degenerate memory: {0}")]
    EmptyMemory(String),

    #[error("variance formula diverges (requires rho > 8/9), got rho = {0}")]
    VarianceDiverges(f64),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("meta-loss became non-finite at outer iteration {iteration}, segment {segment}")]
    MetaLossDiverged { iteration: usize, segment: usize },

    #[error("{path}: {reason} at byte offset {offset}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
