//! File formats, experiment configuration and the command-line pipeline
//! around [`ctmoco_core`].

pub mod cli;
pub mod config;
mod error;
pub mod formats;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod weights;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
