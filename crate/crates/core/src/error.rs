use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown class label `{0}`")]
    UnknownLabel(String),

    #[error("prompt `{0}` does not map to a known label")]
    UnknownPrompt(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint {path}: schema version {found} is not supported (expected {expected})")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("missing {what} at {path}; run the `{stage}` stage first")]
    MissingStage {
        stage: &'static str,
        what: &'static str,
        path: PathBuf,
    },

    #[error(
        "config hash mismatch against upstream `{module}` checkpoint (checkpoint {found}, current config {expected}); rerun `{stage}` or pass --force"
    )]
    ConfigMismatch {
        module: String,
        stage: &'static str,
        found: String,
        expected: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("stats file {path}: {reason}")]
    Stats { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
