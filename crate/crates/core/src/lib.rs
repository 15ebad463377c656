//! Anchor-free object detection from center and corner keypoints.
//!
//! The detector predicts a per-class center heatmap, per-location object
//! size and sub-cell offset, and (during training) a class-agnostic
//! four-corner heatmap. Boxes are decoded from heatmap peaks and then
//! refined by a small head that reads backbone features bilinearly sampled
//! at each object's center and corners.
//!
//! Everything runs on a small reverse-mode autodiff core in [`autodiff`]:
//!
//! * [`network`]: backbone, heads, keypoint geometry, refinement
//! * [`encoder`]: boxes to Gaussian heatmaps and regression targets
//! * [`losses`]: focal loss and masked L1 terms
//! * [`decoder`]: peak picking, top-k, box assembly, IoU NMS
//! * [`evaluator`]: AP at fixed IoU thresholds and size buckets
//! * [`data`]: deterministic synthetic shapes, augmentation, file formats
//! * [`trainer`]: Adam, schedule, checkpoints
//! * [`commands`]: the operations behind the `saccade` binary

pub mod autodiff;
pub mod bench;
pub mod commands;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck_suite;
pub mod losses;
pub mod network;
pub mod trainer;

pub use error::{Error, Result};
