//! File formats, run configuration and the command implementations behind
//! the `disrom` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod format;
pub mod pgm;

pub use commands::CliError;
pub use config::RunConfig;
