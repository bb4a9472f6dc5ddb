use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("invalid label `{0}`")]
    InvalidLabel(String),
    /// The item changed since the client last read it.
    #[error("group `{group}` is at revision {current}, request was based on {given:?}")]
    Conflict { group: String, current: u64, given: Option<u64> },
    #[error(transparent)]
    Core(#[from] foamqc::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ReviewError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type ReviewResult<T> = std::result::Result<T, ReviewError>;
