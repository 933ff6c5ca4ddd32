use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    /// Malformed binary or image data; `offset` is the byte position where
    /// decoding stopped.
    #[error("{what}: {detail} at byte {offset}")]
    Format { what: &'static str, offset: u64, detail: String },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("dataset: {0}")]
    Data(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] scgen_core::Error),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(what: &'static str, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { what, offset, detail: detail.into() }
    }
}

/// Reads a whole file, naming it on failure.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
