//! # facepipe
//!
//! Facial-expression recognition toolkit:
//!
//! - [`imagebuf`]: RGB rasters, boxes, landmarks, crop/rotate/resize
//! - [`colornorm`]: per-channel histogram equalization
//! - [`pipeline`]: face normalization (square, zoom out, crop, equalize,
//!   rotate the eyes level, resize) and top/bottom half masking
//! - [`dataset`]: manifest CSV, single-label filtering, stratified k-fold
//! - [`trainer`]: small MLP classifier trained with SAM in two stages
//! - [`metrics`]: confusion matrix, per-class sensitivity, balanced accuracy
//! - [`report`]: SVG bar charts and merged result tables
//! - [`synth`]: synthetic face corpora for tests and demos
//! - [`cli`]: the commands behind the `facepipe` binary

pub mod cli;
pub mod colornorm;
pub mod dataset;
mod error;
pub mod imagebuf;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use imagebuf::{BoundingBox, FaceLandmarks, ImageBuffer, Point};
