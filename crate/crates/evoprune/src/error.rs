use thiserror::Error;

/// Errors surfaced by the pruning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at batch {batch}: loss is not finite")]
    Divergence { batch: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error("unknown dataset format `{0}`")]
    UnknownFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no layer with id `{0}`")]
    UnknownLayer(String),

    #[error("layer `{0}` is not a convolution")]
    NotConv(String),

    #[error("cannot prune at `{0}`: {1}")]
    PruneBoundary(String, String),

    #[error("at layer {layer}: {source}")]
    AtLayer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
