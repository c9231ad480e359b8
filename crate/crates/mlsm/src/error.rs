use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    /// Bad configuration or command-line usage.
    #[error("config: {0}")]
    Config(String),
    /// An upstream artifact is absent or unusable.
    #[error("{0}")]
    Missing(String),
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint {path} does not match: {reason}")]
    Fingerprint { path: PathBuf, reason: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error(transparent)]
    Core(#[from] mlsm_core::Error),
}

impl Error {
    /// Process exit code: 1 for usage and configuration errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Exists(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

pub(crate) fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}
