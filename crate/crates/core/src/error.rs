use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("operation `{0}` has no gradient rule")]
    NoGradientRule(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("layer index {index} out of range ({layers} layers)")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor `{name}`: {reason}")]
    CheckpointTensor { name: String, reason: String },

    #[error("data format error: {0}")]
    Format(String),

    #[error("classifier is untrained (parameter checksum equals its initialization sentinel)")]
    UntrainedClassifier,

    #[error("frozen model parameters changed during training")]
    FrozenModelChanged,

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
