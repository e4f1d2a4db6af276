//! Graph-language token alignment for recommendation.
//!
//! Pretrained graph embeddings are projected into the input space of a
//! frozen language model, and a logits-matching head turns every output
//! position into a distribution over catalog items.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod checksum;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod head;
pub mod lightgcn;
pub mod lm;
pub mod ndgrad;
pub mod rng;
pub mod textgen;

pub use error::{Error, Result};
