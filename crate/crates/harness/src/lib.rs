//! Experiment harness around `misr-core`: configuration, file formats,
//! orchestration and reporting.

pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod mvol;
pub mod pgm;
pub mod pipeline;
pub mod report;
pub mod table;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
