//! Corpus sampling, pair construction, optimization and the training loop.

mod config;
mod optim;
mod train;

use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::objectives::{EncodedPair, PairBatch};
use crate::textio::read_lines;
use crate::tokenizer::{encode, Vocab};
use crate::translit::{romanize, RuleTable};

pub use config::{Profile, TrainConfig};
pub use optim::{linear_lr, AdamW};
pub use train::{
    checkpoint_name, read_loss_log, select_best_checkpoint, steps_per_epoch, train, write_loss_log, CheckpointScore,
    LogRow, Selection, TrainReport, Trainer,
};

/// Number of lines kept from a corpus of `lines`: `max(ceil(fraction * lines), floor)`,
/// capped at `lines`.
pub fn sample_size(lines: usize, fraction: f64, floor: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let target = ((fraction * lines as f64).ceil() as usize).max(floor);
    Ok(target.min(lines))
}

/// Indices of the sampled lines, ascending.
pub fn sample_indices<R: Rng + ?Sized>(lines: usize, fraction: f64, floor: usize, rng: &mut R) -> Result<Vec<usize>> {
    let target = sample_size(lines, fraction, floor)?;
    if target == lines {
        return Ok((0..lines).collect());
    }
    let mut picked = index::sample(rng, lines, target).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Samples lines without replacement, keeping their original order.
pub fn sample_corpus<S: Clone, R: Rng + ?Sized>(
    lines: &[S],
    fraction: f64,
    floor: usize,
    rng: &mut R,
) -> Result<Vec<S>> {
    Ok(sample_indices(lines.len(), fraction, floor, rng)?
        .into_iter()
        .map(|i| lines[i].clone())
        .collect())
}

/// [`sample_corpus`] over a file.
pub fn sample_corpus_file<R: Rng + ?Sized>(
    path: impl AsRef<Path>,
    fraction: f64,
    floor: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    sample_corpus(&read_lines(path)?, fraction, floor, rng)
}

/// Encoded pairs plus the number of blank lines skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairCorpus {
    pub pairs: Vec<EncodedPair>,
    pub skipped: usize,
}

impl PairCorpus {
    pub fn batch(&self) -> PairBatch {
        PairBatch::new(self.pairs.clone())
    }
}

/// Encodes each non-blank line next to its romanization.
pub fn build_pairs_from_lines<S: AsRef<str>>(
    lines: &[S],
    table: &RuleTable,
    vocab: &Vocab,
    max_len: usize,
) -> PairCorpus {
    let mut out = PairCorpus::default();
    for line in lines {
        let line = line.as_ref();
        if line.trim().is_empty() {
            out.skipped += 1;
            continue;
        }
        out.pairs.push(EncodedPair {
            orig: encode(line, vocab, max_len),
            latn: encode(&romanize(line, table), vocab, max_len),
        });
    }
    out
}

/// [`build_pairs_from_lines`] over a file.
pub fn build_pair_corpus(
    path: impl AsRef<Path>,
    table: &RuleTable,
    vocab: &Vocab,
    max_len: usize,
) -> Result<PairCorpus> {
    Ok(build_pairs_from_lines(&read_lines(path)?, table, vocab, max_len))
}

#[cfg(test)]
mod tests;
