//! Experiment runner for the toy video diffusion lab: strict TOML configs,
//! tensor and checkpoint files, JSON reports, PPM images, and one
//! orchestration entry point per analysis.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod image;
pub mod report;
pub mod stats;
pub mod tensorfile;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use experiments::{run, Ctx, Experiment};
pub use report::Report;
