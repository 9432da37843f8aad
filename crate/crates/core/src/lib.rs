//! Core library: message trees, wire codecs and the fuzzing pipeline stages.

pub mod campaign;
pub mod codec;
pub mod eval;
pub mod ingest;
pub mod llm;
pub mod message;
pub mod path;
pub mod rules;
pub mod strategy;
pub mod testcase;

/// Version stamped into every artifact envelope.
pub const SCHEMA_VERSION: u32 = 1;
