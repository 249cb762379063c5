//! Configuration, training loop and subcommands behind the `ftkit` binary.

pub mod commands;
pub mod config;
pub mod trainer;
