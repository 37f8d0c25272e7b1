//! File formats, run configuration and the command-line protocol for
//! tri-planar segmentation. The numerical pipeline lives in `tpseg-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod volume_io;
pub mod weights;

pub use config::RunConfig;
pub use error::{Error, Result};
