use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {kind}: {detail}")]
    Shape { kind: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumeration size {size} exceeds cap {cap}")]
    CapExceeded { size: u128, cap: u128 },

    #[error("constraint violated: eta * mean eigenvalue = {product} >= 1")]
    Infeasible { product: f64 },

    #[error("training diverged at eta = {eta}")]
    Divergence { eta: f64 },

    #[error("degenerate search: {0}")]
    Degenerate(String),

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            kind,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
