use thiserror::Error;

/// Errors produced by the simulator and its analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("graph is disconnected; mixing would not contract")]
    Disconnected,

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("normal matrix is rank deficient (rank {rank} < dimension {dim})")]
    Singular { rank: usize, dim: usize },

    #[error("iterate diverged at t={t}: node {node} has max-abs entry {magnitude}")]
    Divergence { t: usize, node: usize, magnitude: f64 },

    #[error("missing log: {0}")]
    MissingLog(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
