//! Command-line front end: config resolution, dispatch and artifact emission.

pub mod config;
pub mod run;

pub use config::{parse_config, Command, ConfigError, RunConfig};
pub use run::{run, CliError, Report};
