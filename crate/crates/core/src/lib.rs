//! Diversity-rewarded CFG distillation on a toy autoregressive domain.
//!
//! The crate is `no_std` (with `alloc`) and carries every numerical piece of
//! the pipeline: the style-conditioned Markov corpus and its quality oracles,
//! a small causal transformer with exact reverse-mode gradients, classifier-free
//! guidance, on-policy distillation toward the guided teacher, the embedding
//! diversity reward with its multi-sample policy gradient, weight-space merging,
//! and the quality/diversity/entropy metrics used to trace fronts.
//!
//! IO, file formats and the command line live in the `qdcfg` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cfg;
pub mod corpus;
pub mod distill;
pub mod diversity;
pub mod error;
pub mod eval;
pub mod hash;
pub mod math;
pub mod merge;
pub mod pretrain;
pub mod rng;
pub mod seqmodel;

pub use error::{Error, Result};

/// Token id. Prompt and generation tokens live in separate vocabularies.
pub type Token = u32;
