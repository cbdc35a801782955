//! Pre-norm transformer encoder with a tied MLM head, per-layer hidden
//! states and masked mean pooling.

mod checkpoint;
mod weights;

use std::fmt;
use std::path::Path;

pub use checkpoint::{load_checkpoint, load_params, save_params, Checkpoint};
pub use weights::{LayerWeights, Parameters, Weights};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::numcore::{Graph, Tensor, Var, LAYERNORM_EPS};
use crate::tokenizer::{EncodedSequence, PAD};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_positions: usize,
    /// 1-based layer whose output is mean-pooled for sentence embeddings.
    pub pool_layer: usize,
}

/// `round(2L/3)`, clamped to `1..=L`.
pub fn default_pool_layer(layers: usize) -> usize {
    ((2 * layers) as f64 / 3.0).round().clamp(1.0, layers.max(1) as f64) as usize
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(512)
    }
}

impl ModelConfig {
    /// Four layers of width 64 over a vocabulary of `vocab`.
    pub fn desk(vocab: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 256,
            vocab,
            max_positions: 64,
            pool_layer: default_pool_layer(4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return bad(format!("model dimensions must be positive: {self}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(1..=self.layers).contains(&self.pool_layer) {
            return bad(format!("pool_layer {} outside 1..={}", self.pool_layer, self.layers));
        }
        if self.vocab < 6 {
            return bad(format!("vocab {} below minimum 6", self.vocab));
        }
        if self.max_positions < 3 {
            return bad(format!("max_positions {} below minimum 3", self.max_positions));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "layers={}\nhidden={}\nheads={}\nffn={}\nvocab={}\nmax_positions={}\npool_layer={}\n",
            self.layers, self.hidden, self.heads, self.ffn, self.vocab, self.max_positions, self.pool_layer
        )
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text, origin)?;
        Self::from_kv(&mut kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = KvFile::load(path.as_ref())?;
        Self::from_kv(&mut kv)
    }

    fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let layers = kv.require("layers")?;
        let cfg = ModelConfig {
            layers,
            hidden: kv.require("hidden")?,
            heads: kv.require("heads")?,
            ffn: kv.require("ffn")?,
            vocab: kv.require("vocab")?,
            max_positions: kv.require("max_positions")?,
            pool_layer: kv.take("pool_layer")?.unwrap_or_else(|| default_pool_layer(layers)),
        };
        std::mem::take(kv).finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d={} h={} ffn={} V={} P={} pool_layer={}",
            self.layers, self.hidden, self.heads, self.ffn, self.vocab, self.max_positions, self.pool_layer
        )
    }
}

/// Per-layer activations of a batch, each `[batch * len, hidden]`.
///
/// `layers[0]` is the embedding sum; `layers[l]` is the output of block `l`.
/// When the whole stack ran, the last entry is taken after the final norm.
/// `len` is the longest attended extent in the batch, so trailing padding
/// shared by every sequence is never computed.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub layers: Vec<Var>,
    pub batch: usize,
    pub len: usize,
    /// Attended (non-PAD) positions, `batch * len`.
    pub attention: Vec<bool>,
    /// Positions that take part in mean pooling: not PAD, CLS or SEP.
    pub pooled: Vec<bool>,
}

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("embedding layer always present")
    }

    /// Flat row index of position `pos` in sequence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.len + pos
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Runs the embedding layer and the first `depth` blocks.
///
/// `depth == cfg.layers` also applies the final norm. Attention is masked
/// so PAD positions neither send nor receive weight.
pub fn forward(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    seqs: &[&EncodedSequence],
    depth: usize,
) -> Result<HiddenStates> {
    if seqs.is_empty() {
        return Err(Error::Empty("forward over an empty batch".into()));
    }
    if depth > cfg.layers {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} exceeds {} layers",
            cfg.layers
        )));
    }
    let len = seqs
        .iter()
        .map(|s| s.attention.iter().rposition(|&a| a).map_or(0, |p| p + 1))
        .max()
        .unwrap_or(0)
        .max(1);
    if len > cfg.max_positions {
        return Err(Error::InvalidArgument(format!(
            "sequence length {len} exceeds {} positions",
            cfg.max_positions
        )));
    }
    let batch = seqs.len();
    let mut ids = Vec::with_capacity(batch * len);
    let mut attention = Vec::with_capacity(batch * len);
    let mut pooled = Vec::with_capacity(batch * len);
    for s in seqs {
        for p in 0..len {
            let id = s.ids.get(p).copied().unwrap_or(PAD);
            if id >= cfg.vocab {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {}",
                    cfg.vocab
                )));
            }
            let att = s.attention.get(p).copied().unwrap_or(false);
            ids.push(id);
            attention.push(att);
            pooled.push(att && !s.special.get(p).copied().unwrap_or(true));
        }
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();

    let tok = g.embed_lookup(w.token_embedding, &ids)?;
    let pos = g.embed_lookup(w.position_embedding, &positions)?;
    let mut x = g.add(tok, pos)?;
    let mut layers = vec![x];
    for lw in &w.layers[..depth] {
        let a = g.layernorm(x, lw.attn_norm_gain, lw.attn_norm_bias, LAYERNORM_EPS)?;
        let q = linear(g, a, lw.query_weight, lw.query_bias)?;
        let k = g.matmul(a, lw.key_weight)?;
        let v = linear(g, a, lw.value_weight, lw.value_bias)?;
        let att = g.attention(q, k, v, &attention, batch, len, cfg.heads)?;
        let o = linear(g, att, lw.out_weight, lw.out_bias)?;
        x = g.add(x, o)?;
        let f = g.layernorm(x, lw.ffn_norm_gain, lw.ffn_norm_bias, LAYERNORM_EPS)?;
        let f = linear(g, f, lw.ffn_in_weight, lw.ffn_in_bias)?;
        let f = g.gelu(f);
        let f = linear(g, f, lw.ffn_out_weight, lw.ffn_out_bias)?;
        x = g.add(x, f)?;
        layers.push(x);
    }
    if depth == cfg.layers {
        let last = layers.last_mut().expect("non-empty");
        *last = g.layernorm(*last, w.final_norm_gain, w.final_norm_bias, LAYERNORM_EPS)?;
    }
    Ok(HiddenStates {
        layers,
        batch,
        len,
        attention,
        pooled,
    })
}

/// Picks rows of a `[n, d]` activation.
pub fn select_rows(g: &mut Graph, x: Var, rows: &[usize]) -> Result<Var> {
    g.embed_lookup(x, rows)
}

/// MLM head over `[n, d]` final-layer rows: dense, gelu, norm, then the
/// transposed token embedding plus an output bias. Returns `[n, V]`.
pub fn mlm_logits(g: &mut Graph, w: &Weights<Var>, x: Var) -> Result<Var> {
    let h = linear(g, x, w.head_dense_weight, w.head_dense_bias)?;
    let h = g.gelu(h);
    let h = g.layernorm(h, w.head_norm_gain, w.head_norm_bias, LAYERNORM_EPS)?;
    let et = g.transpose(w.token_embedding)?;
    let logits = g.matmul(h, et)?;
    g.add_bias(logits, w.head_output_bias)
}

/// Averaging matrix `[batch, batch * len]` over the pooled positions.
pub fn pool_matrix(h: &HiddenStates) -> Result<Tensor> {
    let n = h.batch * h.len;
    let mut data = vec![0.0; h.batch * n];
    for b in 0..h.batch {
        let rows = h.row(b, 0)..h.row(b, h.len);
        let count = h.pooled[rows.clone()].iter().filter(|&&p| p).count();
        if count == 0 {
            return Err(Error::Empty(format!("sequence {b} has no poolable positions")));
        }
        for r in rows.filter(|&r| h.pooled[r]) {
            data[b * n + r] = 1.0 / count as f64;
        }
    }
    Tensor::new(vec![h.batch, n], data)
}

/// Mean of `layer` over each sequence's non-special positions (MASK
/// positions count as content). Returns `[batch, d]`.
pub fn mean_pool(g: &mut Graph, h: &HiddenStates, layer: usize) -> Result<Var> {
    let x = *h
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} was not computed")))?;
    let p = g.constant(pool_matrix(h)?);
    g.matmul(p, x)
}

/// Reference pooling of one sequence given its layer rows `[len, d]`.
pub fn mean_pool_rows(rows: &Tensor, seq: &EncodedSequence) -> Result<Vec<f64>> {
    let d = rows.cols();
    let mut acc = vec![0.0; d];
    let mut count = 0;
    for p in 0..rows.rows().min(seq.len()) {
        if seq.attention[p] && !seq.special[p] {
            acc.iter_mut().zip(rows.row(p)).for_each(|(a, x)| *a += x);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("sequence has no poolable positions".into()));
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}
