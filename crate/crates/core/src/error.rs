use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid label {0}: expected +1 or -1")]
    InvalidLabel(f64),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("no fundus field detected: every pixel is at or below brightness {threshold}")]
    AllDark { threshold: u8 },

    #[error("invalid box ({x0}, {y0}, {x1}, {y1}) for a {width}x{height} image")]
    InvalidBox {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
