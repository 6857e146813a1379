//! Part localization with geometric priors for fine-grained recognition.
//!
//! Windows are scored by per-part linear detectors, combined with a layout
//! prior relative to the object window, and the best joint configuration
//! feeds a pose-normalized classifier.

pub mod classify;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod featstore;
pub mod geometry;
pub mod infer;
pub mod pipeline;
pub mod priors;
pub mod proposals;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{iou, nms, BBox};
