use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric parameter is outside its documented domain.
    #[error("parameter error: {0}")]
    Param(String),
    /// Inconsistent or unsatisfiable configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Tensor or array shapes do not agree.
    #[error("shape error: {0}")]
    Shape(String),
    /// Input is well-formed but carries no usable signal (zero FVC, single class, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A flow-volume curve needs more samples than the configured maximum.
    #[error("curve too long: needs {needed} samples but t_max is {t_max}")]
    CurveTooLong { needed: usize, t_max: usize },
    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A record or file does not follow its schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// A binary container is truncated or corrupt.
    #[error("integrity error at byte offset {offset}: {message}")]
    Integrity { offset: u64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Degenerate(_) => "degenerate",
            Error::CurveTooLong { .. } => "curve_too_long",
            Error::NonFinite(_) => "non_finite",
            Error::Schema(_) => "schema",
            Error::Integrity { .. } => "integrity",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
