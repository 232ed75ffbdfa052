use std::path::PathBuf;

/// Crate-wide error type. Tensor shape violations are programming errors and
/// panic instead; everything that depends on external input (files, streams,
/// configs) reports through here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid ppm: {0}")]
    Ppm(String),

    #[error("invalid bitstream: {0}")]
    Bitstream(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("decode failed: {0}")]
    Decode(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
