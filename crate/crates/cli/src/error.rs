use ipo_core::IpoError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable or invalid configuration, or missing input paths.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Runtime(IpoError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("could not write {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Runtime(IpoError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<IpoError> for CliError {
    fn from(e: IpoError) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
