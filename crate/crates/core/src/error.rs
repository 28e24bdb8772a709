use thiserror::Error;

/// Errors raised anywhere in the fingerprinting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("node index {index} out of range for graph with {num_nodes} nodes")]
    NodeOutOfRange { index: usize, num_nodes: usize },

    #[error("direction vector is not unit length (norm {norm})")]
    NonUnitDirection { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("embedding of node {node} is degenerate (norm {norm:e})")]
    DegenerateEmbedding { node: usize, norm: f64 },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("unsupported for integer-valued features: {0}")]
    IntegerFeatures(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fingerprint construction failed: {accepted} of {requested} stationary points accepted")]
    FingerprintConstruction { accepted: usize, requested: usize },

    #[error("every tuple was degenerate for candidate {0}")]
    AllDegenerate(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("serialization error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
