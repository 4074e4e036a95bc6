//! Experiment orchestration for the toy zero-shot summarization lab:
//! configuration, data, runs, manifests and the paper-trends recipe.

pub mod config;
pub mod data;
pub mod manifest;
pub mod recipe;
pub mod run;

pub use config::{Direction, ExperimentConfig};
pub use manifest::RunManifest;
pub use recipe::Lab;
