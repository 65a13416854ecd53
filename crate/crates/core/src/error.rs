use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward requested before a forward pass")]
    MissingForward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IDX format error: {0}")]
    Format(String),

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("detection thresholds are not calibrated")]
    Uncalibrated,

    #[error("class {0} has no predicted members in the calibration data")]
    EmptyClass(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no adversarial starting point found after {0} draws")]
    NoStartingPoint(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
