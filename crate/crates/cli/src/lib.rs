//! Library side of the `qfr` command: run configuration and command
//! execution, shared by the binary and its tests.

pub mod commands;
pub mod config;

pub use commands::{run, Output};
pub use config::{Command, CriterionSpec, RunConfig};
