//! File formats, configs and commands of the `symtrans` tool.

#![allow(clippy::result_large_err)]

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod svol;

pub use cli::run;
pub use error::{CliError, Result};
