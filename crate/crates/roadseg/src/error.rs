use std::path::PathBuf;

pub type Result<T, E = RunError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] roadseg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RunError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for broken preconditions, 3 for numerical
    /// aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use roadseg_core::Error as E;
        match self {
            Self::Core(E::Contract(_) | E::Domain(_) | E::Empty(_)) | Self::Config(_) => 2,
            Self::Core(E::Numerical(_)) => 3,
            _ => 1,
        }
    }
}
