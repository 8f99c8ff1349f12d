use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("invalid scale: {0}")]
    InvalidScale(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("raster too small: {0}")]
    TooSmall(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing resource: {0}")]
    Resource(String),

    #[error("metric undefined: {0}")]
    EmptyMetric(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    Divergence { epoch: usize, iteration: usize, loss: f64 },

    #[error("png: {0}")]
    Png(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// I/O failure tagged with the path involved.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
