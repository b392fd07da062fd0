//! File formats, experiment configuration and the stage pipeline behind the
//! `qdcfg` command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::{Outcome, Run, RunOptions, Stage};
