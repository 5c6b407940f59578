//! Inference: preprocessing, memory-aware batch planning, ensembling,
//! metrics and table I/O.

pub mod ensemble;
pub mod memory;
pub mod metrics;
pub mod preprocess;
pub mod table;

pub use ensemble::{ensemble_predict, EnsembleConfig, MemberSpec};
pub use memory::{MemoryModel, Stage};
pub use preprocess::{PreprocessKind, Preprocessor};

#[cfg(test)]
mod tests;
