//! Error type shared by all pipeline modules.

use std::path::PathBuf;

/// Errors produced anywhere in the segmentation / detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition (non-positive spacing,
    /// bad probability range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A geometric operation produced (or would produce) an empty grid.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A crop region does not intersect the volume it is applied to.
    #[error("empty roi: {0}")]
    EmptyRoi(String),

    /// Two volumes that must share a grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A coarse mask with no foreground was handed to ROI computation.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A landmark required by an ROI rule is absent.
    #[error("missing landmark: {0}")]
    MissingLandmark(String),

    /// Configuration is inconsistent with the data or the model.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Weight transfer between structurally incompatible models.
    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),

    /// A tensor shape is incompatible with the model, naming the axis.
    #[error("shape error on axis {axis}: {message}")]
    Shape { axis: usize, message: String },

    /// A target label is outside the model's class range.
    #[error("invalid target: {0}")]
    InvalidTarget(String),

    /// Training produced a non-finite loss.
    #[error("divergence at batch {batch}: loss became non-finite")]
    Divergence { batch: usize },

    /// A file could not be parsed as the expected format.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
