//! Static-scene reconstruction from RGB-D video with moving objects.
//!
//! Externally supplied detections pick dynamic regions, GrabCut turns their
//! boxes into pixel masks, dense photometric + depth alignment estimates the
//! camera motion from the remaining pixels, and the masked frames are fused
//! into a colored point cloud.

// negated comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod odometry;
pub mod pipeline;
pub mod reconstruction;
pub mod segmentation;
pub mod synthetic;

pub use error::{Error, Result};
