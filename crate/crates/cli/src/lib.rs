//! Operator surface: config parsing and subcommands.

pub mod commands;
pub mod config;

pub use commands::run_command;
pub use config::{load_config, parse_config};
