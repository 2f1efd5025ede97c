//! Crate-wide error type.

/// Everything that can go wrong across the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor operation received incompatible shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op produced a non-finite value (numeric overflow contract).
    #[error("{op}: non-finite output")]
    NonFinite { op: String },

    /// `backward` was called on a non-scalar root.
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// Bad configuration value; the message names the offending field.
    #[error("invalid config: {0}")]
    Config(String),

    /// Checkpoint / cache container problems (magic, version, corruption).
    #[error("container: {0}")]
    Container(String),

    /// Source and target feature layouts cannot be stitched.
    #[error("stitch compatibility: {0}")]
    Compatibility(String),

    /// A feature cache does not match the backbone/dataset it claims.
    #[error("cache provenance mismatch: {0}")]
    Provenance(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
