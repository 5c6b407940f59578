//! The `tabicl` command line: prior generation, pretraining, prediction,
//! evaluation and runtime-law fitting.

pub mod commands;
pub mod config;
pub mod exit;
pub mod timing;

pub use commands::{run, Cli, Command};
