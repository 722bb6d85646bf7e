use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed hierarchy: {0}")]
    MalformedHierarchy(String),
    #[error("hierarchy has multiple roots: {}", .0.join(", "))]
    MultipleRoots(Vec<String>),
    #[error("hierarchy has no root")]
    NoRoot,
    #[error("cycle detected at node `{0}`")]
    Cycle(String),
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node `{0}` is not reachable from the root")]
    Unreachable(String),
    #[error("fine class `{0}` has no coarse mapping")]
    MissingCoarse(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown class index {0}")]
    UnknownClass(usize),

    #[error("truncated stream: {len} bytes is not a multiple of the {record}-byte record")]
    Truncated { len: usize, record: usize },
    #[error("label {label} out of range for {classes} classes (record {record})")]
    LabelOutOfRange { record: usize, label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by layer `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("condition grids differ; missing: {}", .missing.join(", "))]
    GridMismatch { missing: Vec<String> },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedHierarchy(_)
            | Error::MultipleRoots(_)
            | Error::NoRoot
            | Error::Cycle(_)
            | Error::DuplicateName(_)
            | Error::Unreachable(_)
            | Error::MissingCoarse(_) => "hierarchy",
            Error::UnknownNode(_) | Error::UnknownClass(_) => "unknown",
            Error::Truncated { .. } | Error::LabelOutOfRange { .. } => "data",
            Error::ShapeMismatch(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config { .. } => "config",
            Error::GridMismatch { .. } => "grid_mismatch",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
