//! Desk-scale laboratory for multilingual sequence-to-sequence translation
//! and zero-shot paraphrasing.
//!
//! The crate covers the full pipeline: verse-aligned corpus preparation,
//! language-dependent byte-pair encoding, a minimal reverse-mode autodiff
//! engine, an attentional GRU encoder-decoder with target-language flags,
//! Adam training with smoothed parameters and early stopping, beam-search
//! decoding, and paraphrase evaluation (perplexity, BLEU, PINC, copy rate).
//!
//! Everything is CPU-only, deterministic per seed, and sized for toy
//! experiments that fit on a single desk machine.

pub mod autodiff;
pub mod bpe;
pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
