use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate dual-quaternion blend (real norm {norm:e})")]
    DegenerateBlend { norm: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("cluster count {clusters} exceeds point count {points}")]
    ClusterCountExceedsPoints { clusters: usize, points: usize },

    #[error("non-positive depth {depth} at track {track}, frame {frame}")]
    InvalidDepth {
        track: usize,
        frame: usize,
        depth: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("point {point} is bound to missing track {track}")]
    InvalidBinding { point: usize, track: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(message: impl Into<String>) -> Self {
        Error::Parse {
            line: 0,
            column: 0,
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
