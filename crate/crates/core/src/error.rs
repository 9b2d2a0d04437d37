use std::path::PathBuf;

/// Errors raised by mesh construction, assembly and the solvers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("non-physical state: det(F) = {det:e} in element {element}")]
    NonPhysicalState { element: usize, det: f64 },

    #[error("singular matrix (pivot {pivot})")]
    SingularMatrix { pivot: usize },

    #[error("singular interior block in subdomain {subdomain} (pivot {pivot})")]
    SingularSubdomain { subdomain: usize, pivot: usize },

    #[error("malformed interface skeleton: {0}")]
    MalformedSkeleton(String),

    #[error("tangent applied at a state that differs from the last evaluation")]
    StaleState,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
