//! Command implementations behind the `quept` binary.

pub mod ablation;
pub mod args;
pub mod commands;
pub mod manifest;

pub use args::{Cli, Command};
pub use commands::run;
