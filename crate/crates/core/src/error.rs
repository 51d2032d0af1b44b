use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch {expected} vs {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty loss support")]
    EmptyLossSupport,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("shape mismatch between {0} and {1}")]
    LayerChain(String, String),

    #[error("duplicate layer id {0}")]
    DuplicateLayer(String),

    #[error("unknown layer id {0}")]
    UnknownLayer(String),

    #[error("invalid attachment at {layer}: {reason}")]
    InvalidAttachment { layer: String, reason: String },

    #[error("{op} fusion expects r of width {expected}, got {actual}")]
    FusionWidth {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("not a checkpoint")]
    NotCheckpoint,

    #[error("not a dataset file")]
    NotDataset,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("base must be frozen")]
    NotFrozen,

    #[error("network is frozen; parameters cannot be modified")]
    Frozen,

    #[error("non-finite gradient at {0}")]
    NonFiniteGradient(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty input")]
    EmptyInput,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown task kind: {0}")]
    UnknownTaskKind(String),

    #[error("metric {metric} is incompatible with the {task} task")]
    IncompatibleMetric { metric: String, task: String },

    #[error("intractable oracle configuration: {0}")]
    Intractable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownTaskKind(_) | Error::IncompatibleMetric { .. } | Error::Json(_)
        )
    }
}
