//! Fill-in language modeling at desk scale.
//!
//! A bidirectional transformer is trained to recover randomly masked tokens,
//! with the per-sequence mask probability drawn from a noise schedule. Text is
//! produced by filling one mask at a time under a chosen order policy, and
//! sequences are scored exactly for any such order. A causal-masking baseline
//! and an infilling benchmark with ROUGE scoring sit alongside for comparison.
//!
//! Module map:
//!
//! * [`corpus`]: vocabulary, tokenization, windowing, length distribution
//! * [`tensor`]: dense tensors with reverse-mode autodiff
//! * [`model`]: transformer, parameter init, checkpoint container
//! * [`noise`]: mask-probability schedules and token masking
//! * [`train`]: losses, Adam, training loop, metrics
//! * [`decode`]: order policies, samplers, sequential fill-in
//! * [`evalppl`]: order-conditioned log-probability and perplexity
//! * [`infill`]: span tasks, causal-masking transform, ROUGE, benchmark

pub mod corpus;
pub mod decode;
mod error;
pub mod evalppl;
pub mod infill;
pub mod model;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Index into a [`corpus::Vocab`].
pub type TokenId = u32;
