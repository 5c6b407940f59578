//! Tabular in-context learning.
//!
//! A table is embedded column-wise by a set transformer, rows are summarized
//! by a small transformer with rotary positions, and a masked transformer
//! predicts test labels from the labelled train rows in a single forward pass.
//! The crate also carries the synthetic prior used for pretraining, the
//! curriculum trainer, hierarchical many-class inference and a memory-aware
//! batched inference engine.

pub mod class_tree;
pub mod column;
pub mod error;
pub mod icl;
pub mod infer;
pub mod model;
pub mod prior;
pub mod row;
pub mod seed;
pub mod tensor;
pub mod train;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use icl::ClassProbabilities;
pub use model::{Batching, ModelConfig, TabIcl};
