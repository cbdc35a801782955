//! Cross-script representation alignment through romanization.
//!
//! The crate bundles everything needed to run the method end to end at desk
//! scale: a rule-based romanizer ([`translit`]), a BPE tokenizer
//! ([`tokenizer`]), a small reverse-mode autodiff engine ([`numcore`]), a
//! transformer encoder ([`encoder`]), the training objectives
//! ([`objectives`]), the optimization loop ([`pipeline`]) and the evaluation
//! protocol ([`evalsuite`]). [`synth`] generates the synthetic cipher corpora
//! used by the experiments and tests.

pub mod encoder;
pub mod error;
pub mod evalsuite;
mod kv;
pub mod numcore;
pub mod objectives;
pub mod pipeline;
pub mod synth;
pub mod textio;
pub mod tokenizer;
pub mod translit;

pub use error::{Error, Result};
