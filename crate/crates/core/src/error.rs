use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("index {index} out of range for {context} (len {len})")]
    Index {
        context: String,
        index: usize,
        len: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("scene spec invalid: {0}")]
    Spec(String),

    #[error("non-finite value at {location}: {diagnostic}")]
    NonFinite { location: String, diagnostic: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    Gradcheck(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::Param {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.to_string(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param { .. } => "param",
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::Precondition(_) => "precondition",
            Error::Spec(_) => "spec",
            Error::NonFinite { .. } => "non_finite",
            Error::MissingParam(_) => "missing_param",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Integrity(_) => "integrity",
            Error::Config(_) => "config",
            Error::Gradcheck(_) => "gradcheck",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::Json(_) => "json",
        }
    }
}
