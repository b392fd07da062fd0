use std::path::PathBuf;

/// Process exit code for user and configuration errors.
pub const EXIT_USER: i32 = 2;
/// Process exit code for numerical failures during training.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    Config {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing upstream artifact {0} (run the producing subcommand first)")]
    MissingArtifact(PathBuf),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("mixed lineage: {0}")]
    Lineage(String),
    #[error(transparent)]
    Core(#[from] qdcfg_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(qdcfg_core::Error::Numerical { .. })
            | CliError::Core(qdcfg_core::Error::DivergenceInfinite { .. }) => EXIT_NUMERICAL,
            _ => EXIT_USER,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingArtifact(path)
        } else {
            CliError::Io { path, source }
        }
    }
}
