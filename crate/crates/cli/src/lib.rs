//! Scenario files and subcommand pipelines behind the `condflow` binary.

pub mod harness;
pub mod scenario;
