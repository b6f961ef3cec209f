//! Desk-scale laboratory for continual instance learning.
//!
//! Trains Siamese embedding networks on streams of object-instance batches
//! under several continual-learning strategies and two loss families, with
//! synthetic-data transfer and a query-gallery retrieval evaluator that
//! quantifies catastrophic forgetting.

pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub(crate) mod seeds;
pub mod strategies;
pub mod stream;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// Seed-derivation helper shared by the harness for auxiliary streams.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    seeds::derive_seed(base, tags)
}
