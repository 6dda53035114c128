//! Std companion to `phonewatch-core`: frame IO, the detection pipeline,
//! the violation store, evaluation tooling and the HTTP API.

pub mod backend;
pub mod cli;
pub mod config;
pub mod evalkit;
pub mod frames;
pub mod numfmt;
pub mod pipeline;
pub mod scenario;
pub mod server;
pub mod script;
pub mod store;
pub mod timestamp;
