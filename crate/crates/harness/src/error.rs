use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] misr_core::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| HarnessError::Io { path: path.into(), source })
    }
}
