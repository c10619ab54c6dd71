//! Tooth detection and segmentation on panoramic radiographs with a U-Net
//! whose skip connections are gated by per-tooth bounding-box priors.
//!
//! The crate is organised as a pipeline:
//!
//! * [`domain`]: FDI numbering, radiograph categories, annotations, mask stacks.
//! * [`data`]: dataset IO, rasterization, CLAHE, flip augmentation, splits.
//! * [`synth`]: procedural panoramic phantoms with exact ground truth.
//! * [`detect`]: bounding-box prior sources and box-map construction.
//! * [`model`]: the baseline U-Net and the box-gated network.
//! * [`loss`]: regularized Dice loss with analytic gradient.
//! * [`metrics`]: confusion matrix, precision/recall, AP/mAP, Dice.
//! * [`train`]: stage-2 training, evaluation and model comparison.
//! * [`report`]: static plots and summary tables.

pub mod data;
pub mod detect;
pub mod domain;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod report;
pub mod synth;
pub mod train;

pub mod cli;

pub use error::{Error, Result};
