//! File formats, configuration, the LLM client and the command pipeline
//! around `glta-core`.

pub mod assets;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod llm;
pub mod pipeline;

pub use error::{Error, Result};
