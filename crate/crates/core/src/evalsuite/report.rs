use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::{load_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::objectives::Objectives;
use crate::tokenizer::{EncodedSequence, Vocab};

use super::{
    finetune_classifier, finetune_tagger, retrieval_topk, sentence_embeddings, FinetuneConfig, LabeledText,
    TaggedSentence,
};

/// Row label of the model before alignment training.
pub const BASELINE: &str = "baseline";

/// Coordinates of one score.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricKey {
    pub objectives: String,
    pub task: String,
    pub source: String,
    pub target: String,
}

/// Scores in `[0, 1]` keyed by row and column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub scores: BTreeMap<MetricKey, f64>,
    /// Seeds the fine-tuning scores are averaged over.
    pub seeds: Vec<u64>,
}

/// One evaluation column group.
#[derive(Clone, Debug)]
pub enum EvalTask {
    /// Top-`k` retrieval of `candidates[i]` by `queries[i]`.
    Retrieval {
        source: String,
        target: String,
        queries: Vec<EncodedSequence>,
        candidates: Vec<EncodedSequence>,
        k: usize,
    },
    /// Fine-tune on `source`, score macro-F1 on each named test set.
    Classify {
        source: String,
        train: Vec<LabeledText>,
        val: Vec<LabeledText>,
        tests: Vec<(String, Vec<LabeledText>)>,
        config: FinetuneConfig,
    },
    Tag {
        source: String,
        train: Vec<TaggedSentence>,
        val: Vec<TaggedSentence>,
        tests: Vec<(String, Vec<TaggedSentence>)>,
        tagset: Vec<String>,
        config: FinetuneConfig,
    },
}

impl MetricReport {
    /// Row labels: baseline, the ablation grid, then anything else.
    pub fn rows(&self) -> Vec<String> {
        let mut order: Vec<String> = std::iter::once(BASELINE)
            .chain(Objectives::ALL.iter().map(|o| o.label()))
            .map(String::from)
            .collect();
        order.retain(|r| self.scores.keys().any(|k| &k.objectives == r));
        for k in self.scores.keys() {
            if !order.contains(&k.objectives) {
                order.push(k.objectives.clone());
            }
        }
        order
    }

    /// Distinct `(task, source, target)` columns.
    pub fn columns(&self) -> Vec<(String, String, String)> {
        let mut cols: Vec<_> = self
            .scores
            .keys()
            .map(|k| (k.task.clone(), k.source.clone(), k.target.clone()))
            .collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn get(&self, objectives: &str, task: &str, source: &str, target: &str) -> Option<f64> {
        self.scores
            .get(&MetricKey {
                objectives: objectives.into(),
                task: task.into(),
                source: source.into(),
                target: target.into(),
            })
            .copied()
    }

    /// `objectives,task,source,target,score` with scores as fractions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("objectives,task,source,target,score\n");
        for row in self.rows() {
            for (task, source, target) in self.columns() {
                if let Some(v) = self.get(&row, &task, &source, &target) {
                    let _ = writeln!(out, "{row},{task},{source},{target},{v}");
                }
            }
        }
        out
    }

    /// Aligned table, one row per objective combination, scores x100.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let headers: Vec<String> = cols.iter().map(|(t, s, g)| format!("{t} {s}>{g}")).collect();
        let rows = self.rows();
        let first = rows.iter().map(String::len).chain([10]).max().unwrap_or(10);
        let widths: Vec<usize> = headers.iter().map(|h| h.len().max(6)).collect();
        let mut out = format!("{:<first$}", "objectives");
        for (h, w) in headers.iter().zip(&widths) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for row in &rows {
            let _ = write!(out, "{row:<first$}");
            for ((task, source, target), w) in cols.iter().zip(&widths) {
                match self.get(row, task, source, target) {
                    Some(v) => write!(out, "  {:>w$.1}", v * 100.0),
                    None => write!(out, "  {:>w$}", "-"),
                }
                .expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }
}

fn evaluate_row(
    label: &str,
    ck: &Checkpoint,
    tasks: &[EvalTask],
    vocab: &Vocab,
    seeds: &[u64],
) -> Result<Vec<(MetricKey, f64)>> {
    let key = |task: &str, source: &str, target: &str| MetricKey {
        objectives: label.to_string(),
        task: task.to_string(),
        source: source.to_string(),
        target: target.to_string(),
    };
    let mut out = Vec::new();
    for task in tasks {
        match task {
            EvalTask::Retrieval {
                source,
                target,
                queries,
                candidates,
                k,
            } => {
                let q: Vec<&EncodedSequence> = queries.iter().collect();
                let c: Vec<&EncodedSequence> = candidates.iter().collect();
                let layer = ck.config.pool_layer;
                let src = sentence_embeddings(&ck.params, &ck.config, &q, layer)?;
                let tgt = sentence_embeddings(&ck.params, &ck.config, &c, layer)?;
                out.push((
                    key("retrieval", source, target),
                    retrieval_topk(&src, &tgt, *k)?.accuracy,
                ));
            }
            EvalTask::Classify {
                source,
                train,
                val,
                tests,
                config,
            } => {
                let mut sums = vec![0.0; tests.len()];
                for &seed in seeds {
                    let fc = FinetuneConfig { seed, ..config.clone() };
                    let model = finetune_classifier(&ck.params, &ck.config, vocab, train, val, &fc)?;
                    for (s, (_, data)) in sums.iter_mut().zip(tests) {
                        *s += model.evaluate(vocab, data)?;
                    }
                }
                for (s, (target, _)) in sums.into_iter().zip(tests) {
                    out.push((key("classify", source, target), s / seeds.len() as f64));
                }
            }
            EvalTask::Tag {
                source,
                train,
                val,
                tests,
                tagset,
                config,
            } => {
                let mut sums = vec![0.0; tests.len()];
                for &seed in seeds {
                    let fc = FinetuneConfig { seed, ..config.clone() };
                    let model = finetune_tagger(&ck.params, &ck.config, vocab, train, val, tagset, &fc)?;
                    for (s, (_, data)) in sums.iter_mut().zip(tests) {
                        *s += model.evaluate(vocab, data)?;
                    }
                }
                for (s, (target, _)) in sums.into_iter().zip(tests) {
                    out.push((key("tag", source, target), s / seeds.len() as f64));
                }
            }
        }
    }
    Ok(out)
}

/// Evaluates the baseline and one checkpoint per objective combination on
/// every task. Rows are evaluated on up to `jobs` threads; the result does
/// not depend on `jobs`.
pub fn ablation_report(
    baseline: &Path,
    combos: &[(Objectives, PathBuf)],
    tasks: &[EvalTask],
    vocab: &Vocab,
    seeds: &[u64],
    jobs: usize,
) -> Result<MetricReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("at least one seed is required".into()));
    }
    let mut rows = vec![(BASELINE.to_string(), baseline.to_path_buf())];
    for o in Objectives::ALL {
        let path = combos
            .iter()
            .find(|(c, _)| *c == o)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing checkpoint for {}", o.label())))?;
        rows.push((o.label().to_string(), path));
    }
    let loaded: Vec<(String, Checkpoint)> = rows
        .into_iter()
        .map(|(label, path)| Ok((label, load_checkpoint(&path)?)))
        .collect::<Result<_>>()?;

    let jobs = jobs.clamp(1, loaded.len());
    let per_job = loaded.len().div_ceil(jobs);
    let results: Vec<Result<Vec<(MetricKey, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = loaded
            .chunks(per_job)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|(label, ck)| evaluate_row(label, ck, tasks, vocab, seeds))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut report = MetricReport {
        scores: BTreeMap::new(),
        seeds: seeds.to_vec(),
    };
    for r in results {
        report.scores.extend(r?);
    }
    Ok(report)
}
