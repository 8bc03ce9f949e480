//! Multi-class fiducial-marker segmentation for fluoroscopy.
//!
//! The crate covers the whole experiment loop:
//!
//! - [`types`]: images, label maps/cubes, probability cubes and normalization.
//! - [`synth`]: seeded synthetic fluoroscopy frames with exact ground truth.
//! - [`pipeline`]: joint image/label transforms, augmentation schemes, enhancement.
//! - [`unet`]: the configurable n-block U-Net.
//! - [`losses`]: softmax, (weighted) cross-entropy and focal loss with exact gradients.
//! - [`trainer`]: momentum descent, plateau-driven learning-rate steps, the
//!   two-step schedule and the five method variants.
//! - [`metrics`]: IoU/mIoU, marker-centre extraction and centre errors.
//! - [`experiment`]: ablation grid, method comparison, overlays, plots, exports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod types;
pub mod unet;

pub use error::{Error, Result};
