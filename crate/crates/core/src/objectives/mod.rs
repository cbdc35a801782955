//! Training objectives: MLM on both scripts, sentence-level contrastive
//! alignment (SEQ), transliteration language modeling (TLM), and their
//! unweighted sum.

mod check;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{forward, mean_pool, mlm_logits, select_rows, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::tokenizer::{mask_tokens, EncodedSequence, MaskedBatch, MaskedSequence, Vocab};

pub use check::{combined_gradient_check, GradCheckSetup};

/// A sentence in its original script and its romanization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub orig: EncodedSequence,
    pub latn: EncodedSequence,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub pairs: Vec<EncodedPair>,
}

impl PairBatch {
    pub fn new(pairs: Vec<EncodedPair>) -> Self {
        PairBatch { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Which optional terms join the always-on MLM loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Objectives {
    pub seq: bool,
    pub tlm: bool,
}

impl Objectives {
    pub const MLM: Objectives = Objectives { seq: false, tlm: false };
    pub const MLM_SEQ: Objectives = Objectives { seq: true, tlm: false };
    pub const MLM_TLM: Objectives = Objectives { seq: false, tlm: true };
    pub const FULL: Objectives = Objectives { seq: true, tlm: true };

    /// The ablation grid in report order.
    pub const ALL: [Objectives; 4] = [Self::MLM, Self::MLM_SEQ, Self::MLM_TLM, Self::FULL];

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match (self.seq, self.tlm) {
            (false, false) => "MLM",
            (true, false) => "MLM+SEQ",
            (false, true) => "MLM+TLM",
            (true, true) => "MLM+SEQ+TLM",
        }
    }
}

impl fmt::Display for Objectives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match (self.seq, self.tlm) {
            (false, false) => "mlm",
            (true, false) => "mlm+seq",
            (false, true) => "mlm+tlm",
            (true, true) => "full",
        })
    }
}

impl FromStr for Objectives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm" => Ok(Self::MLM),
            "mlm+seq" => Ok(Self::MLM_SEQ),
            "mlm+tlm" => Ok(Self::MLM_TLM),
            "full" | "mlm+seq+tlm" => Ok(Self::FULL),
            "" | "none" => Err(Error::InvalidArgument(
                "at least the MLM objective must be enabled".into(),
            )),
            other => Err(Error::InvalidArgument(format!(
                "unknown objectives {other:?} (expected mlm, mlm+seq, mlm+tlm or full)"
            ))),
        }
    }
}

/// Scalar values of one evaluation; disabled terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mlm_orig: f64,
    pub mlm_latn: f64,
    pub seq: Option<f64>,
    pub tlm: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Components in `(name, value)` form, disabled ones omitted.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("mlm_orig", self.mlm_orig), ("mlm_latn", self.mlm_latn)];
        out.extend(self.seq.map(|v| ("seq", v)));
        out.extend(self.tlm.map(|v| ("tlm", v)));
        out
    }
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mlm_orig: Var,
    pub mlm_latn: Var,
    pub seq: Option<Var>,
    pub tlm: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        LossBreakdown {
            mlm_orig: v(self.mlm_orig),
            mlm_latn: v(self.mlm_latn),
            seq: self.seq.map(v),
            tlm: self.tlm.map(v),
            total: v(self.total),
        }
    }
}

/// Knobs shared by all loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossHyper {
    pub mask_prob: f64,
    pub temperature: f64,
    /// Length cap for the concatenated TLM input.
    pub max_len: usize,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            mask_prob: 0.15,
            temperature: 1.0,
            max_len: 64,
        }
    }
}

/// One step's inputs with all random choices already made.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub mlm_orig: MaskedBatch,
    pub mlm_latn: MaskedBatch,
    /// Clean pairs for the contrastive term.
    pub clean: PairBatch,
    /// Masked concatenations; empty when TLM is off.
    pub tlm: MaskedBatch,
}

impl PreparedBatch {
    pub fn num_masked(&self) -> usize {
        self.mlm_orig.num_masked() + self.mlm_latn.num_masked() + self.tlm.num_masked()
    }
}

/// Draws the MLM masks for both scripts and, if enabled, the TLM
/// concatenation order and masks.
pub fn prepare_batch<R: Rng + ?Sized>(
    batch: &PairBatch,
    toggles: Objectives,
    hyper: &LossHyper,
    vocab: &Vocab,
    rng: &mut R,
) -> PreparedBatch {
    let mut orig = Vec::with_capacity(batch.len());
    let mut latn = Vec::with_capacity(batch.len());
    for p in &batch.pairs {
        orig.push(mask_tokens(&p.orig, hyper.mask_prob, vocab, rng));
        latn.push(mask_tokens(&p.latn, hyper.mask_prob, vocab, rng));
    }
    let tlm = if toggles.tlm {
        mask_tlm_pairs(batch, hyper.mask_prob, hyper.max_len, vocab, rng)
    } else {
        MaskedBatch::default()
    };
    PreparedBatch {
        mlm_orig: MaskedBatch { sequences: orig },
        mlm_latn: MaskedBatch { sequences: latn },
        clean: batch.clone(),
        tlm,
    }
}

/// MLM losses of several batches from one shared forward pass; each entry
/// is the mean cross-entropy over that batch's masked positions, or a
/// constant 0 when it has none.
pub fn mlm_losses(g: &mut Graph, w: &Weights<Var>, cfg: &ModelConfig, batches: &[&MaskedBatch]) -> Result<Vec<Var>> {
    let seqs: Vec<&MaskedSequence> = batches.iter().flat_map(|b| &b.sequences).collect();
    if batches.iter().all(|b| b.num_masked() == 0) {
        return Ok(batches.iter().map(|_| g.constant(Tensor::scalar(0.0))).collect());
    }
    let inputs: Vec<&EncodedSequence> = seqs.iter().map(|s| &s.input).collect();
    let h = forward(g, w, cfg, &inputs, cfg.layers)?;
    let mut out = Vec::with_capacity(batches.len());
    let mut first = 0;
    for b in batches {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, s) in b.sequences.iter().enumerate() {
            for (pos, label) in s.labels.iter().enumerate() {
                if let Some(t) = *label {
                    rows.push(h.row(first + i, pos));
                    targets.push(Some(t));
                }
            }
        }
        first += b.sequences.len();
        if rows.is_empty() {
            out.push(g.constant(Tensor::scalar(0.0)));
            continue;
        }
        let x = select_rows(g, h.last(), &rows)?;
        let logits = mlm_logits(g, w, x)?;
        out.push(g.cross_entropy(logits, &targets)?);
    }
    Ok(out)
}

pub fn mlm_loss(g: &mut Graph, w: &Weights<Var>, cfg: &ModelConfig, batch: &MaskedBatch) -> Result<Var> {
    Ok(mlm_losses(g, w, cfg, &[batch])?[0])
}

/// Contrastive loss over `[2N, d]` sentence embeddings, rows `0..N` in the
/// original script and `N..2N` their romanizations.
///
/// Every row is an anchor. Its positive is the other member of its pair;
/// its negatives are the 2N-2 rows of the other pairs. The anchor itself is
/// not in the denominator. Returns the mean over all 2N anchors.
pub fn contrastive_from_embeddings(g: &mut Graph, emb: Var, temperature: f64) -> Result<Var> {
    let rows = g.shape(emb).first().copied().unwrap_or(0);
    if rows == 0 || rows % 2 != 0 || g.shape(emb).len() != 2 {
        return Err(Error::Shape(format!(
            "contrastive loss needs [2N, d] embeddings, got {:?}",
            g.shape(emb)
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let n = rows / 2;
    let et = g.transpose(emb)?;
    let sims = g.matmul(emb, et)?;
    let sims = g.scale(sims, 1.0 / temperature);
    let mut index = Vec::with_capacity(rows * (rows - 1));
    for a in 0..rows {
        let pos = (a + n) % rows;
        index.push(a * rows + pos);
        index.extend((0..rows).filter(|&j| j != a && j != pos).map(|j| a * rows + j));
    }
    let logits = g.gather(sims, &index, vec![rows, rows - 1])?;
    g.cross_entropy(logits, &vec![Some(0); rows])
}

/// Mean-pooled pool-layer embeddings of the clean pairs, stacked
/// `[orig..., latn...]`.
pub fn pair_embeddings(g: &mut Graph, w: &Weights<Var>, cfg: &ModelConfig, batch: &PairBatch) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Empty("contrastive loss over an empty batch".into()));
    }
    let seqs: Vec<&EncodedSequence> = batch
        .pairs
        .iter()
        .map(|p| &p.orig)
        .chain(batch.pairs.iter().map(|p| &p.latn))
        .collect();
    let h = forward(g, w, cfg, &seqs, cfg.pool_layer)?;
    mean_pool(g, &h, cfg.pool_layer)
}

pub fn seq_contrastive_loss(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    batch: &PairBatch,
    temperature: f64,
) -> Result<Var> {
    let emb = pair_embeddings(g, w, cfg, batch)?;
    contrastive_from_embeddings(g, emb, temperature)
}

/// Concatenates a pair as `CLS s1 SEP s2 SEP` in random order, padded to
/// `max_len`. Returns the sequence and whether the original came first.
///
/// Oversized pairs are cut longest-segment-first until they fit, so the
/// result fills `max_len` exactly and keeps both segments. Positions run
/// straight through the boundary.
pub fn build_tlm_pair<R: Rng + ?Sized>(
    orig: &EncodedSequence,
    latn: &EncodedSequence,
    max_len: usize,
    rng: &mut R,
) -> (EncodedSequence, bool) {
    assert!(max_len >= 5, "TLM max_len must be at least 5, got {max_len}");
    let orig_first = rng.random_bool(0.5);
    let (mut a, mut b) = if orig_first {
        (orig.content(), latn.content())
    } else {
        (latn.content(), orig.content())
    };
    let budget = max_len - 3;
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    (EncodedSequence::from_segments(&[&a, &b], max_len), orig_first)
}

fn mask_tlm_pairs<R: Rng + ?Sized>(
    batch: &PairBatch,
    prob: f64,
    max_len: usize,
    vocab: &Vocab,
    rng: &mut R,
) -> MaskedBatch {
    let sequences = batch
        .pairs
        .iter()
        .map(|p| {
            let (joined, _) = build_tlm_pair(&p.orig, &p.latn, max_len, rng);
            mask_tokens(&joined, prob, vocab, rng)
        })
        .collect();
    MaskedBatch { sequences }
}

/// Builds, masks and scores the TLM concatenations of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn tlm_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    batch: &PairBatch,
    prob: f64,
    max_len: usize,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Var> {
    let masked = mask_tlm_pairs(batch, prob, max_len, vocab, rng);
    mlm_loss(g, w, cfg, &masked)
}

/// Evaluates every enabled term of a prepared batch into one graph and
/// sums them without weights.
pub fn combined_loss(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    batch: &PreparedBatch,
    toggles: Objectives,
    temperature: f64,
) -> Result<LossVars> {
    let mlm = mlm_losses(g, w, cfg, &[&batch.mlm_orig, &batch.mlm_latn])?;
    let (mlm_orig, mlm_latn) = (mlm[0], mlm[1]);
    let mut total = g.add(mlm_orig, mlm_latn)?;
    let seq = if toggles.seq {
        let s = seq_contrastive_loss(g, w, cfg, &batch.clean, temperature)?;
        total = g.add(total, s)?;
        Some(s)
    } else {
        None
    };
    let tlm = if toggles.tlm {
        let t = mlm_loss(g, w, cfg, &batch.tlm)?;
        total = g.add(total, t)?;
        Some(t)
    } else {
        None
    };
    Ok(LossVars {
        mlm_orig,
        mlm_latn,
        seq,
        tlm,
        total,
    })
}
