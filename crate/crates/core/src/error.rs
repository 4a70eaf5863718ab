use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transformed line is degenerate (maps to the line at infinity)")]
    DegenerateLine,

    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),

    #[error("degenerate view: {0}")]
    DegenerateView(String),

    #[error("invalid scene ranges: {0}")]
    InvalidRanges(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("image too small: {width}x{height}")]
    ImageTooSmall { width: u32, height: u32 },

    #[error("homography warp degenerate after {0} resamples")]
    WarpDegenerate(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative or non-finite evidence at index {index}: {value}")]
    NegativeEvidence { index: usize, value: f64 },

    #[error("manifest {path}:{line}: {message}")]
    ManifestSchema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset is empty")]
    DataEmpty,

    #[error("non-finite loss at step {step}, batch sample offset {batch_index}")]
    NonFiniteLoss { step: usize, batch_index: usize },

    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
