use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("model form: {0}")]
    Form(String),

    #[error("bias layout: {0}")]
    Layout(String),

    #[error("unit out of range: {0}")]
    UnitOutOfRange(String),

    #[error("layer 0 cannot be reconstructed; its kernels already live in the input dual space")]
    FirstLayer,

    #[error("no equivalent-form rule for layer `{id}` ({kind})")]
    NoFoldRule { id: String, kind: String },

    #[error("mode/coordinate mismatch: {0}")]
    ModeMismatch(String),

    #[error("incomplete RM4 set: {0}")]
    IncompleteSet(String),

    #[error("size guard exceeded: {units} units > {limit}")]
    SizeGuard { units: usize, limit: usize },

    #[error("unknown template `{0}`")]
    UnknownTemplate(String),

    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("tensor format: {0}")]
    Format(String),

    #[error("blob out of bounds: offset {offset} + {needed} bytes exceeds blob length {len}")]
    BlobBounds { offset: u64, needed: u64, len: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the CLI's machine-parsable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::NonFinite(_) => "non_finite",
            Error::Form(_) => "form",
            Error::Layout(_) => "layout",
            Error::UnitOutOfRange(_) => "unit_range",
            Error::FirstLayer => "first_layer",
            Error::NoFoldRule { .. } => "fold",
            Error::ModeMismatch(_) => "mode",
            Error::IncompleteSet(_) => "incomplete",
            Error::SizeGuard { .. } => "size_guard",
            Error::UnknownTemplate(_) => "template",
            Error::Schema { .. } => "schema",
            Error::Format(_) => "format",
            Error::BlobBounds { .. } => "blob_bounds",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
