use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field parameters: {0}")]
    InvalidField(String),

    #[error("voxel grid expects {expected} samples, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("direction {0:?} is parallel to the up axis; object frame is undefined")]
    DegenerateFrame([f64; 3]),

    #[error("pixel ({u}, {v}) lies outside a {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate depth fit: normal matrix is singular (relative determinant {0:e})")]
    DegenerateFit(f64),

    #[error("invalid depth at pixel ({row}, {col})")]
    InvalidDepth { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("diffusion step {t} outside 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("fit diverged at iteration {0}: masked MSE kept rising")]
    Diverged(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("cached artifact {path} does not match its recorded hash")]
    StaleArtifact { path: PathBuf },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    PngDecode(#[from] png::DecodingError),

    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),
}
