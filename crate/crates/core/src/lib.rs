//! Recursive plan-ahead agent loop for language models acting in text
//! environments.

pub mod context;
pub mod engine;
pub mod kitchen;
pub mod llm;
pub mod prompts;
pub mod trace;
pub mod tree;

pub use engine::{run, Environment, RunConfig, RunResult, Termination};
