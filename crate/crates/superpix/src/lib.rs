//! Unsupervised superpixel segmentation by per-image optimization.
//!
//! This crate fits a small convolutional network to a single image so that
//! the network's per-pixel assignment distribution carves the image into a
//! requested number of superpixels. No training data is involved: the
//! objective balances pixelwise assignment confidence, spatial smoothness
//! gated by image gradients, color reconstruction, and agreement between the
//! edge structure of the image and of its superpixelated reconstruction.
//!
//! The high-level entry points are [`train::fit`], which optimizes the model
//! for one image, and [`train::segment`], which reduces the fitted soft
//! assignments to a hard label map. See the `examples/` directory for
//! end-to-end usage, starting with `segment_image`.

pub mod cli;
pub mod gemm;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;

pub use tensor::{
    AssignmentTensor, EdgeMap, ImageTensor, LabelMap, Scalar, SuperpixelColors, Tensor,
};

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("weights file malformed: {0}")]
    Weights(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what}")]
    InvalidDistribution { what: String },

    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
