use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{load_checkpoint, save_params, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::evalsuite::{retrieval_topk, sentence_embeddings};
use crate::numcore::Graph;
use crate::objectives::{
    combined_loss, prepare_batch, EncodedPair, LossBreakdown, Objectives, PairBatch, PreparedBatch,
};
use crate::tokenizer::{EncodedSequence, Vocab};

use super::{linear_lr, AdamW, TrainConfig};

const LOG_HEADER: &str = "step,lr,mlm_orig,mlm_latn,seq,tlm,total";

/// One optimizer step as written to the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Scheduled learning rate after this update, which is the rate the
    /// next update will use. It reaches 0 at the last step.
    pub lr: f64,
    /// Mean over the step's micro-batches.
    pub loss: LossBreakdown,
}

/// Owns the parameters and optimizer state across updates.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: Parameters,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub toggles: Objectives,
    pub total_steps: usize,
    /// Updates applied so far.
    pub step: usize,
    opt: AdamW,
}

impl Trainer {
    pub fn new(
        params: Parameters,
        model: ModelConfig,
        config: TrainConfig,
        toggles: Objectives,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if total_steps == 0 {
            return Err(Error::InvalidArgument("training needs at least one step".into()));
        }
        if config.max_len > model.max_positions {
            return Err(Error::InvalidArgument(format!(
                "max_len {} exceeds the model's {} positions",
                config.max_len, model.max_positions
            )));
        }
        let opt = AdamW::new(&params, config.beta1, config.beta2, config.eps, config.weight_decay);
        Ok(Trainer {
            params,
            model,
            config,
            toggles,
            total_steps,
            step: 0,
            opt,
        })
    }

    /// Learning rate of the next update; the first update uses `lr0`.
    pub fn next_lr(&self) -> Result<f64> {
        linear_lr(self.step, self.total_steps, self.config.lr)
    }

    /// Replaces the stored gradients with the mean gradient of `micro` and
    /// returns the mean loss values.
    pub fn gradients(&mut self, micro: &[PreparedBatch]) -> Result<LossBreakdown> {
        if micro.is_empty() {
            return Err(Error::Empty("a step needs at least one micro-batch".into()));
        }
        self.params.zero_grads();
        let scale = 1.0 / micro.len() as f64;
        let mut acc: Option<LossBreakdown> = None;
        for batch in micro {
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, true);
            let vars = combined_loss(
                &mut g,
                &bound,
                &self.model,
                batch,
                self.toggles,
                self.config.temperature,
            )?;
            let b = vars.breakdown(&g);
            for (name, value) in b.components().into_iter().chain([("total", b.total)]) {
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        component: name,
                        value,
                        step: self.step + 1,
                    });
                }
            }
            g.backward(vars.total)?;
            self.params.accumulate_grads(&bound, &g, scale);
            acc = Some(match acc {
                None => scaled(&b, scale),
                Some(a) => add(&a, &scaled(&b, scale)),
            });
        }
        Ok(acc.expect("non-empty"))
    }

    /// Computes gradients over `micro` and applies one AdamW update.
    pub fn step(&mut self, micro: &[PreparedBatch]) -> Result<LogRow> {
        let lr = self.next_lr()?;
        let loss = self.gradients(micro)?;
        self.opt.step(&mut self.params, lr)?;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            lr: linear_lr(self.step, self.total_steps, self.config.lr)?,
            loss,
        })
    }
}

fn scaled(b: &LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        mlm_orig: b.mlm_orig * s,
        mlm_latn: b.mlm_latn * s,
        seq: b.seq.map(|v| v * s),
        tlm: b.tlm.map(|v| v * s),
        total: b.total * s,
    }
}

fn add(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    let opt = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x + y);
    LossBreakdown {
        mlm_orig: a.mlm_orig + b.mlm_orig,
        mlm_latn: a.mlm_latn + b.mlm_latn,
        seq: opt(a.seq, b.seq),
        tlm: opt(a.tlm, b.tlm),
        total: a.total + b.total,
    }
}

/// Outcome of a full training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: Parameters,
    /// Checkpoint directories in step order.
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LogRow>,
    pub steps: usize,
}

/// Optimizer steps per epoch for `n` pairs.
pub fn steps_per_epoch(n: usize, config: &TrainConfig) -> usize {
    n.div_ceil(config.batch_size).div_ceil(config.grad_accum)
}

/// Directory name of the checkpoint taken after `step` updates.
pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:06}")
}

/// Trains on `pairs` for `config.epochs` epochs, writing checkpoints and
/// `loss_log.csv` under `out_dir`.
///
/// Pairs are shuffled each epoch and cut into micro-batches of
/// `batch_size`; every `grad_accum` consecutive micro-batches (fewer at the
/// end of an epoch) form one update. Checkpoints are taken every
/// `checkpoint_every` updates and after the last one.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: Parameters,
    model: &ModelConfig,
    pairs: &[EncodedPair],
    vocab: &Vocab,
    config: &TrainConfig,
    toggles: Objectives,
    out_dir: impl AsRef<Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    if vocab.len() != model.vocab {
        return Err(Error::InvalidArgument(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.vocab
        )));
    }
    let per_epoch = steps_per_epoch(pairs.len(), config);
    let total = per_epoch * config.epochs;
    let mut trainer = Trainer::new(params, model.clone(), config.clone(), toggles, total)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("train_config.txt");
    fs::write(&config_path, config.to_kv()).map_err(|e| Error::io(&config_path, e))?;

    let hyper = config.loss_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let micro: Vec<PairBatch> = order
            .chunks(config.batch_size)
            .map(|c| PairBatch::new(c.iter().map(|&i| pairs[i].clone()).collect()))
            .collect();
        for group in micro.chunks(config.grad_accum) {
            let prepared: Vec<PreparedBatch> = group
                .iter()
                .map(|b| prepare_batch(b, toggles, &hyper, vocab, &mut rng))
                .collect();
            let row = trainer.step(&prepared)?;
            progress(&row);
            log.push(row);
            if trainer.step % config.checkpoint_every == 0 || trainer.step == total {
                let dir = out_dir.join(checkpoint_name(trainer.step));
                save_params(&trainer.params, model, trainer.step, &dir)?;
                checkpoints.push(dir);
            }
        }
    }
    write_loss_log(out_dir.join("loss_log.csv"), &log)?;
    trainer.params.zero_grads();
    Ok(TrainReport {
        params: trainer.params,
        checkpoints,
        log,
        steps: total,
    })
}

/// Writes the loss log as CSV; disabled components are left empty.
pub fn write_loss_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.step,
            r.lr,
            l.mlm_orig,
            l.mlm_latn,
            opt(l.seq),
            opt(l.tlm),
            l.total
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a log written by [`write_loss_log`].
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, LOG_HEADER)) => {}
        _ => return Err(Error::parse(path, 1, format!("expected header {LOG_HEADER:?}"))),
    }
    lines
        .map(|(i, line)| {
            let bad = |m: String| Error::parse(path, i + 1, m);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(LogRow {
                step: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
                lr: num(f[1])?,
                loss: LossBreakdown {
                    mlm_orig: num(f[2])?,
                    mlm_latn: num(f[3])?,
                    seq: opt(f[4])?,
                    tlm: opt(f[5])?,
                    total: num(f[6])?,
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointScore {
    pub path: PathBuf,
    pub step: usize,
    pub accuracy: f64,
}

/// The chosen checkpoint and the score of every candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub best: PathBuf,
    pub scores: Vec<CheckpointScore>,
}

/// Picks the checkpoint with the highest original-to-romanized top-`k`
/// retrieval accuracy on `dev`; ties go to the earliest step.
pub fn select_best_checkpoint(checkpoints: &[PathBuf], dev: &PairBatch, k: usize) -> Result<Selection> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("no checkpoints to select from".into()));
    }
    if dev.len() < 2 {
        return Err(Error::Empty(format!("need at least 2 dev pairs, got {}", dev.len())));
    }
    let orig: Vec<&EncodedSequence> = dev.pairs.iter().map(|p| &p.orig).collect();
    let latn: Vec<&EncodedSequence> = dev.pairs.iter().map(|p| &p.latn).collect();
    let mut scores = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let ck = load_checkpoint(path)?;
        let layer = ck.config.pool_layer;
        let src = sentence_embeddings(&ck.params, &ck.config, &orig, layer)?;
        let tgt = sentence_embeddings(&ck.params, &ck.config, &latn, layer)?;
        scores.push(CheckpointScore {
            path: path.clone(),
            step: ck.step,
            accuracy: retrieval_topk(&src, &tgt, k)?.accuracy,
        });
    }
    let best = scores
        .iter()
        .min_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.step.cmp(&b.step)))
        .expect("non-empty")
        .path
        .clone();
    Ok(Selection { best, scores })
}
