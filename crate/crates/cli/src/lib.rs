//! Command-line front end: run configuration, exit-code taxonomy and the
//! subcommands behind the `flowscale` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{resolve_output, CvConfig, DataConfig, ModelConfig, RunConfig, OUTPUT_ROOT_ENV, PRECIP_DEQUANT_NOISE};
pub use error::{CliError, Result};
