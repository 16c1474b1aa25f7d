use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents that do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid hyperparameters or architecture settings.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-domain user data.
    #[error("input error: {0}")]
    Input(String),

    /// Caller broke an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A parse failure with its location.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by bad data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
