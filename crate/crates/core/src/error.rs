use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image buffer of {width}x{height} needs {expected} samples, got {actual}")]
    SampleCount {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("landmark {name} at ({x:.2}, {y:.2}) lies outside the {width}x{height} frame")]
    LandmarkOutOfFrame {
        name: &'static str,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("empty histogram")]
    EmptyHistogram,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("manifest row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("unknown label token {0:?}")]
    UnknownLabel(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("label {0} is not part of the class list")]
    UnknownClass(String),

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("missing normalized image for sample {id:?} at {path}")]
    MissingImage { id: String, path: PathBuf },

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("malformed report: {0}")]
    ReportFormat(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
