//! Zero-shot transfer evaluation: sentence retrieval, fine-tuned
//! classification and tagging, macro-F1, vocabulary coverage and the
//! ablation report.

mod data;
mod finetune;
mod report;

use std::collections::BTreeSet;
use std::path::Path;

use crate::encoder::{forward, mean_pool, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor};
use crate::textio::read_lines;
use crate::tokenizer::{EncodedSequence, Vocab};

pub use data::{load_labeled, load_tagged, parse_labeled, parse_tagged, LabeledText, TaggedSentence};
pub use finetune::{finetune_classifier, finetune_tagger, Classifier, FinetuneConfig, Head, Tagger};
pub use report::{ablation_report, EvalTask, MetricKey, MetricReport, BASELINE};

/// Sequences per forward pass when embedding.
const EMBED_CHUNK: usize = 32;

/// Mean-pooled layer-`layer` embedding of each sequence, as rows of `[n, d]`.
pub fn sentence_embeddings(
    params: &Parameters,
    cfg: &ModelConfig,
    seqs: &[&EncodedSequence],
    layer: usize,
) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences to embed".into()));
    }
    let mut rows = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let mut g = Graph::new();
        let w = params.bind(&mut g, false);
        let h = forward(&mut g, &w, cfg, chunk, layer)?;
        let pooled = mean_pool(&mut g, &h, layer)?;
        let t = g.value(pooled);
        rows.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
    }
    Tensor::from_rows(&rows)
}

/// Top-k retrieval outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub k: usize,
    pub accuracy: f64,
    pub queries: usize,
    pub hits: Vec<bool>,
    /// Queries whose own embedding or gold candidate had zero norm; these
    /// are scored as misses.
    pub degenerate: usize,
}

fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Query `i` hits when candidate `i` ranks among the `k` most cosine-similar
/// rows of `target`. Equal similarities rank the lower index first; a
/// zero-norm row has similarity `-inf` to everything.
pub fn retrieval_topk(source: &Tensor, target: &Tensor, k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if source.shape().len() != 2 || source.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "retrieval needs equal [n, d] matrices, got {:?} and {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let n = source.rows();
    if n == 0 {
        return Err(Error::Empty("no retrieval queries".into()));
    }
    let norm = |t: &Tensor, i: usize| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
    let src_norms: Vec<f64> = (0..n).map(|i| norm(source, i)).collect();
    let tgt_norms: Vec<f64> = (0..n).map(|i| norm(target, i)).collect();
    let mut hits = Vec::with_capacity(n);
    let mut degenerate = 0;
    for i in 0..n {
        if src_norms[i] == 0.0 || tgt_norms[i] == 0.0 {
            degenerate += 1;
            hits.push(false);
            continue;
        }
        let q = source.row(i);
        let gold = cosine(q, target.row(i), src_norms[i], tgt_norms[i]);
        let above = (0..n)
            .filter(|&j| j != i)
            .filter(|&j| {
                let s = cosine(q, target.row(j), src_norms[i], tgt_norms[j]);
                s > gold || (s == gold && j < i)
            })
            .count();
        hits.push(above < k);
    }
    let accuracy = hits.iter().filter(|&&h| h).count() as f64 / n as f64;
    Ok(RetrievalResult {
        k,
        accuracy,
        queries: n,
        hits,
        degenerate,
    })
}

/// Unweighted mean of per-class F1 over the classes present in `gold` or
/// `pred`. A class with no true positives scores 0.
pub fn macro_f1<L: Ord>(gold: &[L], pred: &[L]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no labels to score".into()));
    }
    let classes: BTreeSet<&L> = gold.iter().chain(pred).collect();
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = gold.iter().zip(pred).filter(|(g, p)| *g == c && *p == c).count() as f64;
            let fp = pred.iter().filter(|&p| p == c).count() as f64 - tp;
            let fn_ = gold.iter().filter(|&g| g == c).count() as f64 - tp;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Distinct non-special token ids used when tokenizing `lines`.
pub fn vocab_coverage<S: AsRef<str>>(lines: &[S], vocab: &Vocab) -> usize {
    token_set(lines, vocab).len()
}

/// The set counted by [`vocab_coverage`].
pub fn token_set<S: AsRef<str>>(lines: &[S], vocab: &Vocab) -> BTreeSet<usize> {
    lines
        .iter()
        .flat_map(|l| vocab.tokenize(l.as_ref()))
        .filter(|&id| !Vocab::is_special(id))
        .collect()
}

/// [`vocab_coverage`] over the union of several files.
pub fn vocab_coverage_files<P: AsRef<Path>>(paths: &[P], vocab: &Vocab) -> Result<usize> {
    let mut set = BTreeSet::new();
    for p in paths {
        set.extend(token_set(&read_lines(p)?, vocab));
    }
    Ok(set.len())
}
