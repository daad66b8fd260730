use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint container (bad magic bytes)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
    /// A configuration file failed to parse; `key` is the path of the
    /// offending entry, such as `train.batch_size`.
    #[error("{}: invalid configuration at `{key}`: {message}", path.display())]
    Config { path: PathBuf, key: String, message: String },
    #[error(transparent)]
    Core(#[from] osnet_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Usage(#[from] clap::Error),
    /// A check run by the command did not pass.
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Whether the failure stems from user-supplied configuration rather
    /// than from the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Usage(_) | Error::Core(osnet_core::Error::Config(_)))
    }
}
