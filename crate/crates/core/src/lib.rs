//! Building-damage detection on multi-date satellite imagery.
//!
//! The pipeline tiles a co-registered image stack into 64x64 patches,
//! labels them from sparse point annotations extended forward and backward
//! in time, trains a convolutional change-detection classifier on pre/post
//! patch pairs, scans every patch at every date, and then smooths the
//! resulting score panel with a random forest over spatial-ring and
//! temporal-lag statistics. Evaluation is imbalance-aware (ROC-AUC plus
//! average precision on natural and 1:1 rebalanced samples) and an
//! event-study regression validates score panels against externally
//! recorded strike events. A synthetic-city generator provides ground
//! truth for end-to-end testing at desk scale.

pub mod error;
pub mod event_study;
mod seeds;
pub mod labels;
pub mod metrics;
pub mod net;
pub mod raster;
pub mod smoother;
pub mod synth;

pub use error::{Error, Result};
pub use raster::{PatchId, PATCH_SIZE};
