//! Command-line orchestration for the two-stage damage-detection pipeline.
//!
//! The binary wraps this library; the stage functions are public so
//! integration tests can drive full runs in-process.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod svg;

pub use config::{parse_config, parse_config_text, RunConfig};
pub use manifest::{RunLock, RunManifest};
