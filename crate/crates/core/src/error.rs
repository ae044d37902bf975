use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),

    #[error("class directory `{class}` contains no readable images")]
    EmptyClass { class: String },

    #[error("dataset {0} contains no samples")]
    EmptyDataset(PathBuf),

    #[error("pixel ({x}, {y}) has color {rgb:?}, which matches no color-table entry")]
    UnknownColor { x: u32, y: u32, rgb: [u8; 3] },

    #[error("{path}: {source} (lenient color matching maps it to the unknown class)")]
    MaskDecode {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("class index {index} at ({x}, {y}) is out of range for {classes} classes")]
    IndexOutOfRange {
        x: u32,
        y: u32,
        index: u8,
        classes: usize,
    },

    #[error("invalid color table: {0}")]
    InvalidColorTable(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid annotations: {0}")]
    InvalidAnnotations(String),

    #[error("unpaired segmentation file {0}")]
    UnpairedFile(PathBuf),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
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

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
