//! The `semfuzz` command line and the glue between pipeline stages.

pub mod cli;
pub mod config;
pub mod stages;
pub mod targets;

pub use cli::run;
