use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid bbox: {0}")]
    InvalidBox(String),

    #[error("objectness out of range: {0}")]
    ObjectnessOutOfRange(f64),

    #[error("embedding file: {0}")]
    Embedding(String),

    #[error("embedding norm {norm:?} outside tolerance (row {row})")]
    EmbeddingNorm { row: usize, norm: f32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("proposal {0} is in the unknown stream but has no embedding")]
    MissingEmbedding(String),

    #[error("image {0} appears in both calibration and evaluation sets")]
    ImageOverlap(String),

    #[error("impossible geometry: {0}")]
    Geometry(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
