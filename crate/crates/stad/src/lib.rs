//! Multi-stream spatio-temporal action detection.
//!
//! The crate implements a single-shot action detector with four input
//! streams — single-frame RGB, single-frame optical flow, and their
//! clip-based 3D counterparts — sharing one anchor lattice so that
//! per-anchor confidence scores can be fused late. Per-frame detections
//! are linked online into action tubes and scored with frame-level and
//! video-level mean average precision.
//!
//! Module map:
//! - [`types`]: shared domain values (boxes, detections, clips, tubes)
//! - [`boxops`]: IoU, anchor offset coding, non-maximum suppression
//! - [`anchors`]: default-box lattice generation and target matching
//! - [`backbone`]: 2D/3D convolutional trunks, kernel inflation, temporal pooling
//! - [`detector`]: stream models, prediction, decoding, loss, training
//! - [`flow`]: optical-flow providers (precomputed files, synthetic)
//! - [`fusion`]: late fusion of per-anchor scores across streams
//! - [`linking`]: online detection-to-tube linking
//! - [`eval`]: frame-mAP and video-mAP with spatio-temporal tube IoU
//! - [`data`]: dataset formats, persistence, synthetic video generator
//! - [`config`]: detector presets and stream combination parsing

pub mod anchors;
pub mod backbone;
pub mod boxops;
pub mod config;
pub mod data;
pub mod detector;
pub mod eval;
pub mod flow;
pub mod fusion;
pub mod linking;
pub mod types;
mod util;

pub use types::{
    ActionTube, BoundingBox, ClipTensor, Detection, FrameAnnotation, Modality, StreamKind,
    TemporalArity, TubeElement,
};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("flow unavailable for video '{video}' frame {frame}: {reason}")]
    FlowUnavailable {
        video: String,
        frame: usize,
        reason: String,
    },
    #[error("anchor grids differ: {0}")]
    GridMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
