//! File formats, the embedding cache, plots and the `scsam` command line
//! around [`scsam_core`].

pub mod cache;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod runs;
pub mod viz;

pub use config::RunConfig;
pub use error::{CliError, Result};
