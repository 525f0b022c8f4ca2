//! Sequence-to-sequence definition modeling: generate a dictionary
//! definition for a word highlighted in its context of occurrence.
//!
//! The crate covers the full pipeline on CPU with no external model
//! dependencies: corpus curation, vocabulary and frozen pre-trained
//! embeddings, an encoder-decoder Transformer with three definiendum
//! integration strategies (non-contextual, additive marking, post-encoding
//! selection), Adam/Noam training with token batching and checkpointing,
//! and perplexity evaluation plus greedy/beam generation.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod embeddings;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod marking;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transformer;
