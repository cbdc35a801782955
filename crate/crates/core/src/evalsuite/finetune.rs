use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{forward, select_rows, ModelConfig, Parameters, Weights};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::pipeline::{linear_lr, AdamW};
use crate::tokenizer::{encode, encode_words, EncodedSequence, Vocab};

use super::{macro_f1, LabeledText, TaggedSentence};

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Capped at the model's position count.
    pub max_len: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub head_std: f64,
}

impl FinetuneConfig {
    pub fn taxi1500() -> Self {
        FinetuneConfig {
            lr: 1e-5,
            epochs: 40,
            batch_size: 32,
            grad_accum: 1,
            max_len: 100,
            patience: 5,
            seed: 42,
            weight_decay: 0.0,
            head_std: 0.02,
        }
    }

    pub fn sib200() -> Self {
        FinetuneConfig {
            max_len: 160,
            ..Self::taxi1500()
        }
    }

    pub fn ner() -> Self {
        FinetuneConfig {
            lr: 2e-5,
            epochs: 5,
            batch_size: 32,
            grad_accum: 2,
            max_len: 256,
            ..Self::taxi1500()
        }
    }

    pub fn pos() -> Self {
        FinetuneConfig {
            epochs: 10,
            ..Self::ner()
        }
    }

    pub const PRESETS: [&'static str; 4] = ["taxi1500", "sib200", "ner", "pos"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "taxi1500" => Ok(Self::taxi1500()),
            "sib200" => Ok(Self::sib200()),
            "ner" => Ok(Self::ner()),
            "pos" => Ok(Self::pos()),
            other => Err(Error::InvalidArgument(format!(
                "unknown fine-tuning preset {other:?} (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.epochs == 0
            || self.batch_size == 0
            || self.grad_accum == 0
            || self.patience == 0
        {
            return Err(Error::InvalidArgument(format!(
                "lr, epochs, batch_size, grad_accum and patience must be positive: {self:?}"
            )));
        }
        if self.max_len < 3 {
            return Err(Error::InvalidArgument(format!("max_len {} below 3", self.max_len)));
        }
        Ok(())
    }
}

/// Linear output layer `[d, classes]` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A sequence with the positions to classify and their gold classes.
struct Example {
    seq: EncodedSequence,
    targets: Vec<(usize, usize)>,
}

/// Class id used for validation labels the head cannot produce.
const UNSEEN: usize = usize::MAX;

fn leaf(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
    if trainable {
        g.param(copy)
    } else {
        g.constant(copy)
    }
}

/// Logits `[rows, classes]` for the target positions of `batch`, in order.
fn logits(
    g: &mut Graph,
    params: &Parameters,
    head: &Head,
    cfg: &ModelConfig,
    batch: &[&Example],
    trainable: bool,
) -> Result<(Var, Weights<Var>, Var, Var)> {
    let w = params.bind(g, trainable);
    let hw = leaf(g, &head.weight, trainable);
    let hb = leaf(g, &head.bias, trainable);
    let seqs: Vec<&EncodedSequence> = batch.iter().map(|e| &e.seq).collect();
    let h = forward(g, &w, cfg, &seqs, cfg.layers)?;
    let rows: Vec<usize> = batch
        .iter()
        .enumerate()
        .flat_map(|(b, e)| e.targets.iter().map(move |&(p, _)| (b, p)))
        .map(|(b, p)| h.row(b, p))
        .collect();
    let x = select_rows(g, h.last(), &rows)?;
    let z = g.matmul(x, hw)?;
    Ok((g.add_bias(z, hb)?, w, hw, hb))
}

/// Predicted class for every target position, flattened in order.
fn predict(params: &Parameters, head: &Head, cfg: &ModelConfig, examples: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in examples.chunks(32) {
        let batch: Vec<&Example> = chunk.iter().filter(|e| !e.targets.is_empty()).collect();
        if batch.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let (z, ..) = logits(&mut g, params, head, cfg, &batch, false)?;
        let t = g.value(z);
        out.extend((0..t.rows()).map(|r| {
            let row = t.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        }));
    }
    Ok(out)
}

struct Tuned {
    params: Parameters,
    head: Head,
    history: Vec<f64>,
    best_epoch: usize,
}

fn validation_f1(params: &Parameters, head: &Head, cfg: &ModelConfig, val: &[Example]) -> Result<f64> {
    let gold: Vec<usize> = val.iter().flat_map(|e| e.targets.iter().map(|&(_, c)| c)).collect();
    if gold.is_empty() {
        return Err(Error::Empty("validation set has no labeled positions".into()));
    }
    macro_f1(&gold, &predict(params, head, cfg, val)?)
}

/// Full fine-tuning with early stopping on validation macro-F1; returns the
/// weights of the best epoch.
fn run(
    params: &Parameters,
    cfg: &ModelConfig,
    classes: usize,
    train: &[Example],
    val: &[Example],
    fc: &FinetuneConfig,
) -> Result<Tuned> {
    fc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
    let mut params = params.clone();
    let mut head = Head {
        weight: Tensor::randn(&[cfg.hidden, classes], fc.head_std, &mut rng),
        bias: Tensor::zeros(&[classes]),
    };
    let mut opt = {
        let mut all = params.values();
        all.extend([&head.weight, &head.bias]);
        AdamW::for_tensors(&all, 0.9, 0.999, 1e-8, fc.weight_decay)
    };
    let per_epoch = train.len().div_ceil(fc.batch_size).div_ceil(fc.grad_accum);
    let total = per_epoch * fc.epochs;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = Tuned {
        history: Vec::new(),
        best_epoch: 0,
        params: params.clone(),
        head: head.clone(),
    };
    let mut best_f1 = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 1..=fc.epochs {
        order.shuffle(&mut rng);
        let micro: Vec<Vec<&Example>> = order
            .chunks(fc.batch_size)
            .map(|c| c.iter().map(|&i| &train[i]).filter(|e| !e.targets.is_empty()).collect())
            .collect();
        for group in micro.chunks(fc.grad_accum) {
            params.zero_grads();
            head.weight.zero_grad();
            head.bias.zero_grad();
            let scale = 1.0 / group.len() as f64;
            for batch in group.iter().filter(|b| !b.is_empty()) {
                let mut g = Graph::new();
                let (z, w, hw, hb) = logits(&mut g, &params, &head, cfg, batch, true)?;
                let targets: Vec<Option<usize>> = batch
                    .iter()
                    .flat_map(|e| e.targets.iter().map(|&(_, c)| Some(c)))
                    .collect();
                let loss = g.cross_entropy(z, &targets)?;
                if !g.value(loss).item().is_finite() {
                    return Err(Error::NonFinite {
                        component: "fine-tuning",
                        value: g.value(loss).item(),
                        step: step + 1,
                    });
                }
                g.backward(loss)?;
                params.accumulate_grads(&w, &g, scale);
                for (t, v) in [(&mut head.weight, hw), (&mut head.bias, hb)] {
                    if let Some(grad) = g.grad(v) {
                        t.accumulate_grad(grad, scale);
                    }
                }
            }
            let mut slots = params.values_mut();
            slots.extend([&mut head.weight, &mut head.bias]);
            for t in slots.iter_mut().filter(|t| t.grad.is_none()) {
                t.grad = Some(vec![0.0; t.numel()]);
            }
            opt.step_tensors(slots, linear_lr(step, total, fc.lr)?)?;
            step += 1;
        }
        let f1 = validation_f1(&params, &head, cfg, val)?;
        best.history.push(f1);
        if f1 > best_f1 {
            best_f1 = f1;
            best.best_epoch = epoch;
            best.params = params.clone();
            best.head = head.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= fc.patience {
                break;
            }
        }
    }
    Ok(best)
}

/// A fine-tuned sentence classifier over the final-layer CLS vector.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub params: Parameters,
    pub config: ModelConfig,
    pub head: Head,
    /// Class names, index = class id.
    pub classes: Vec<String>,
    pub max_len: usize,
    /// Validation macro-F1 after each epoch run.
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

fn class_examples(data: &[LabeledText], classes: &[String], vocab: &Vocab, max_len: usize) -> Vec<Example> {
    data.iter()
        .map(|d| Example {
            seq: encode(&d.text, vocab, max_len),
            targets: vec![(0, classes.iter().position(|c| *c == d.label).unwrap_or(UNSEEN))],
        })
        .collect()
}

/// Fine-tunes the encoder and a linear head on `train`, stopping early on
/// validation macro-F1.
pub fn finetune_classifier(
    params: &Parameters,
    cfg: &ModelConfig,
    vocab: &Vocab,
    train: &[LabeledText],
    val: &[LabeledText],
    fc: &FinetuneConfig,
) -> Result<Classifier> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(
            "classification needs non-empty train and validation splits".into(),
        ));
    }
    let classes: Vec<String> = train
        .iter()
        .map(|d| d.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training set has a single class {:?}; need at least two",
            classes[0]
        )));
    }
    let max_len = fc.max_len.min(cfg.max_positions);
    let tuned = run(
        params,
        cfg,
        classes.len(),
        &class_examples(train, &classes, vocab, max_len),
        &class_examples(val, &classes, vocab, max_len),
        fc,
    )?;
    Ok(Classifier {
        params: tuned.params,
        config: cfg.clone(),
        head: tuned.head,
        classes,
        max_len,
        history: tuned.history,
        best_epoch: tuned.best_epoch,
    })
}

impl Classifier {
    pub fn predict<S: AsRef<str>>(&self, vocab: &Vocab, texts: &[S]) -> Result<Vec<String>> {
        let examples: Vec<Example> = texts
            .iter()
            .map(|t| Example {
                seq: encode(t.as_ref(), vocab, self.max_len),
                targets: vec![(0, 0)],
            })
            .collect();
        Ok(predict(&self.params, &self.head, &self.config, &examples)?
            .into_iter()
            .map(|c| self.classes[c].clone())
            .collect())
    }

    /// Macro-F1 on labeled data.
    pub fn evaluate(&self, vocab: &Vocab, data: &[LabeledText]) -> Result<f64> {
        let texts: Vec<&str> = data.iter().map(|d| d.text.as_str()).collect();
        let gold: Vec<&str> = data.iter().map(|d| d.label.as_str()).collect();
        let pred = self.predict(vocab, &texts)?;
        macro_f1(&gold, &pred.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

/// A fine-tuned tagger predicting at the first subword of each word.
#[derive(Clone, Debug)]
pub struct Tagger {
    pub params: Parameters,
    pub config: ModelConfig,
    pub head: Head,
    pub tagset: Vec<String>,
    pub max_len: usize,
    pub history: Vec<f64>,
    pub best_epoch: usize,
}

/// Encodes a sentence; targets sit at the first subword of each word that
/// survives truncation. Returns the example and the word index per target.
fn tag_example(words: &[String], tags: Option<&[usize]>, vocab: &Vocab, max_len: usize) -> (Example, Vec<usize>) {
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let (seq, starts) = encode_words(&refs, vocab, max_len);
    let mut targets = Vec::new();
    let mut word_of = Vec::new();
    for (p, w) in starts.iter().enumerate() {
        if let Some(w) = *w {
            targets.push((p, tags.map_or(0, |t| t[w])));
            word_of.push(w);
        }
    }
    (Example { seq, targets }, word_of)
}

fn tag_ids(s: &TaggedSentence, tagset: &[String]) -> Result<Vec<usize>> {
    if s.words.len() != s.tags.len() {
        return Err(Error::Shape(format!(
            "{} words but {} tags",
            s.words.len(),
            s.tags.len()
        )));
    }
    s.tags
        .iter()
        .map(|t| {
            tagset
                .iter()
                .position(|x| x == t)
                .ok_or_else(|| Error::InvalidArgument(format!("tag {t:?} is not in the tagset")))
        })
        .collect()
}

/// Fine-tunes the encoder and a per-position head on tagged sentences.
pub fn finetune_tagger(
    params: &Parameters,
    cfg: &ModelConfig,
    vocab: &Vocab,
    train: &[TaggedSentence],
    val: &[TaggedSentence],
    tagset: &[String],
    fc: &FinetuneConfig,
) -> Result<Tagger> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty(
            "tagging needs non-empty train and validation splits".into(),
        ));
    }
    if tagset.is_empty() {
        return Err(Error::Empty("empty tagset".into()));
    }
    let max_len = fc.max_len.min(cfg.max_positions);
    let examples = |data: &[TaggedSentence]| -> Result<Vec<Example>> {
        data.iter()
            .map(|s| Ok(tag_example(&s.words, Some(&tag_ids(s, tagset)?), vocab, max_len).0))
            .collect()
    };
    let tuned = run(params, cfg, tagset.len(), &examples(train)?, &examples(val)?, fc)?;
    Ok(Tagger {
        params: tuned.params,
        config: cfg.clone(),
        head: tuned.head,
        tagset: tagset.to_vec(),
        max_len,
        history: tuned.history,
        best_epoch: tuned.best_epoch,
    })
}

impl Tagger {
    /// One tag per word; words cut off by truncation get `None`.
    pub fn predict(&self, vocab: &Vocab, words: &[String]) -> Result<Vec<Option<String>>> {
        let (example, word_of) = tag_example(words, None, vocab, self.max_len);
        let mut out = vec![None; words.len()];
        if word_of.is_empty() {
            return Ok(out);
        }
        let pred = predict(&self.params, &self.head, &self.config, std::slice::from_ref(&example))?;
        for (w, c) in word_of.into_iter().zip(pred) {
            out[w] = Some(self.tagset[c].clone());
        }
        Ok(out)
    }

    /// Macro-F1 over all predicted words.
    pub fn evaluate(&self, vocab: &Vocab, data: &[TaggedSentence]) -> Result<f64> {
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for s in data {
            for (g, p) in s.tags.iter().zip(self.predict(vocab, &s.words)?) {
                if let Some(p) = p {
                    gold.push(g.clone());
                    pred.push(p);
                }
            }
        }
        macro_f1(&gold, &pred)
    }
}
