use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid hyper-parameter or layer configuration.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    /// Operation issued in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    #[error("argument error: {0}")]
    Argument(String),
    /// Malformed dataset file.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    /// Network description does not compose.
    #[error("build error: {0}")]
    Build(String),
    /// Checkpoint rejected.
    #[error("load error: {0}")]
    Load(String),
    /// Non-finite value detected during training.
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
