use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes it cannot combine.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage has no samples")]
    EmptyStage,

    #[error("degenerate class: labels contain {positives} positives and {negatives} negatives")]
    DegenerateClass { positives: usize, negatives: usize },

    #[error("all {0} classes are degenerate")]
    AllClassesDegenerate(usize),

    #[error("class names do not match the canonical pathology list: {0:?}")]
    ClassNameMismatch(Vec<String>),

    #[error("manifest row {row}: {detail}")]
    Manifest { row: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("model spec digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
