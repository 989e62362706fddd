use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value produced at tape node {node}")]
    FiniteViolation { node: usize },

    #[error("variable {node} is not recorded on this tape")]
    NotALeaf { node: usize },

    #[error("no double-backward rule for `{0}`")]
    UnsupportedSecondOrder(&'static str),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid feature dimension {0}: must be positive and even")]
    InvalidDim(usize),

    #[error("at least one environment is required")]
    NoEnvironments,

    #[error("IDX format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid batch size {batch_size} for dataset of {n} samples")]
    InvalidBatch { batch_size: usize, n: usize },

    #[error("environment index {index} out of range for {count} heads")]
    BadEnvIndex { index: usize, count: usize },

    #[error("head mode mismatch: {0}")]
    HeadModeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step} (epoch {epoch}): non-finite loss")]
    Divergence { step: u64, epoch: usize },

    #[error("trial with seed {seed} failed: {source}")]
    TrialFailed { seed: u64, source: Box<Error> },

    #[error("seed collision between training and test environments: {0}")]
    SeedCollision(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Whether this is (or wraps) a training divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::TrialFailed { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    /// Whether the error stems from a malformed or inconsistent configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::Toml(_)
            | Error::HeadModeMismatch(_)
            | Error::InvalidDim(_)
            | Error::InvalidBatch { .. }
            | Error::NoEnvironments
            | Error::SeedCollision(_) => true,
            Error::TrialFailed { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
