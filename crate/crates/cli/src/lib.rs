//! The `regiontok` command-line tool: run configuration, manifests and the
//! subcommand implementations.

pub mod commands;
pub mod config;
pub mod http;
pub mod manifest;
pub mod selftest;

pub use commands::{run, Cli};
