use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no anchors: at least one observed point is required")]
    NoAnchors,

    #[error("target coincides with observation at time {0}")]
    TargetCoincides(f64),

    #[error("time {0} is not a pending target")]
    UnknownTarget(f64),

    #[error("gap exceeds model capacity: gap {gap} > 2^{max_level}")]
    GapExceedsCapacity { gap: f64, max_level: u32 },

    #[error("invalid gap {0}: gaps must be strictly positive")]
    NonPositiveGap(f64),

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no distribution head: model was built without a stochastic head")]
    NoDistributionHead,

    #[error("missing checkpoint for model {0}")]
    MissingModel(usize),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("series id mismatch: {0}")]
    SeriesMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("run directory {0} is locked by another invocation")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NoAnchors => "no_anchors",
            Error::TargetCoincides(_) => "target_coincides",
            Error::UnknownTarget(_) => "unknown_target",
            Error::GapExceedsCapacity { .. } => "gap_exceeds_capacity",
            Error::NonPositiveGap(_) => "non_positive_gap",
            Error::InvalidPoint(_) => "invalid_point",
            Error::Config(_) => "config",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::TapeConsumed => "tape_consumed",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NoDistributionHead => "no_distribution_head",
            Error::MissingModel(_) => "missing_model",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::SeriesMismatch(_) => "series_mismatch",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Locked(_) => "locked",
        }
    }
}
