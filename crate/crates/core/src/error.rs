use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("window out of bounds: {0}")]
    Bounds(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("unknown layer `{name}` (valid layers: {})", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("layer `{layer}` has unsupported kind `{kind}`")]
    UnsupportedKind { layer: String, kind: String },

    #[error("corrupt network data: {0}")]
    Corrupt(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("non-finite value in {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
