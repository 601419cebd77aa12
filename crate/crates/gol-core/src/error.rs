//! Crate-wide error type and result alias.

use thiserror::Error;

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by activation, loss, data, training, and analysis code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite score at index {index}")]
    NonFiniteScore { index: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("target entry at index {index} must be 0 or 1, got {value}")]
    InvalidTarget { index: usize, value: f64 },

    #[error("softmax cross-entropy requires exactly one positive target, got {count}")]
    NotOneHot { count: usize },

    #[error("temperature must be positive and finite, got {value}")]
    InvalidTemperature { value: f64 },

    #[error("clip range must satisfy lo < hi with finite bounds, got [{lo}, {hi}]")]
    InvalidClipRange { lo: f64, hi: f64 },

    #[error("frequency threshold lambda must be positive and finite, got {value}")]
    InvalidLambda { value: f64 },

    #[error("probability {name} must lie in [0, 1], got {value}")]
    InvalidProbability { name: &'static str, value: f64 },

    #[error("class count must be at least 2, got {count}")]
    DegenerateClassCount { count: usize },

    #[error("overflow in exp(exp(-bias)) for bias {bias}")]
    BiasOverflow { bias: f64 },

    #[error("annotation {index} references unknown image id {image_id}")]
    UnknownImageId { index: usize, image_id: u64 },

    #[error("annotation {index} references unknown category id {category_id}")]
    UnknownCategoryId { index: usize, category_id: u64 },

    #[error("unknown category id {category_id}")]
    UnknownCategory { category_id: u64 },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error(
        "annotation {index}: center ({x}, {y}) outside image bounds {width} x {height}"
    )]
    CenterOutOfBounds { index: usize, x: f64, y: f64, width: f64, height: f64 },

    #[error("image {id} has non-positive dimensions {width} x {height}")]
    BadImageDims { id: u64, width: f64, height: f64 },

    #[error("annotation table contains no objects")]
    NoObjects,

    #[error("grid dimensions must be at least 1x1, got {grid_h}x{grid_w}")]
    BadGridDims { grid_h: usize, grid_w: usize },

    #[error("grid shape mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    GridShapeMismatch { left_h: usize, left_w: usize, right_h: usize, right_w: usize },

    #[error("smoothing epsilon must be positive and finite, got {value}")]
    InvalidEpsilon { value: f64 },

    #[error("class {class} has zero image frequency")]
    ZeroFrequency { class: usize },

    #[error("repeat-factor threshold must lie in (0, 1], got {value}")]
    InvalidRepeatThreshold { value: f64 },

    #[error("object {index} carries no feature vector")]
    MissingFeatures { index: usize },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("divergence at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("malformed grid file: {reason}")]
    MalformedGrid { reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
