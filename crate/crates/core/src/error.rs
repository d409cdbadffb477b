use thiserror::Error;

/// Errors produced by the forest, inference and simulation routines.
#[derive(Debug, Error)]
pub enum SaefError {
    #[error("empty logit vector")]
    EmptyLogits,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    #[error("degenerate prototype")]
    DegeneratePrototype,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("k = {k} out of range for {n} points")]
    KOutOfRange { k: usize, n: usize },

    #[error("silhouette needs at least 2 clusters and 3 points (got {clusters} clusters, {points} points)")]
    SilhouetteUndefined { clusters: usize, points: usize },

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid bundle: {0}")]
    Bundle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SaefError> = std::result::Result<T, E>;
