//! Desk-scale training laboratory for radiology report summarization.
//!
//! The crate implements the full "pretrain, midtrain, finetune" adaptation
//! pipeline at toy scale: a tape-based autodiff tensor core, a byte-level
//! BPE tokenizer with reserved sentinel ids, span-corruption denoising,
//! a small encoder-decoder transformer with relative position biases,
//! AdamW with stage-specific schedules, greedy/beam decoding, and a
//! four-metric evaluation suite.

pub mod corpus;
pub mod rng;
pub mod decode;
pub mod denoise;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;
