use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{combined_loss, prepare_batch, EncodedPair, LossHyper, Objectives, PairBatch, PreparedBatch};
use crate::encoder::{default_pool_layer, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::numcore::{finite_diff_check, sample_coords, GradCheckReport, Graph};
use crate::tokenizer::{EncodedSequence, Vocab, NUM_SPECIAL, SPECIAL_TOKENS};

/// Setup of a finite-difference check of the full combined loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub pairs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub init_std: f64,
    pub mask_prob: f64,
    pub step: f64,
    /// Coordinates checked; 0 means every parameter.
    pub coords: usize,
}

impl GradCheckSetup {
    /// Two layers of width 16 over a 64-token vocabulary.
    pub fn small(pairs: usize, seed: u64) -> Self {
        GradCheckSetup {
            pairs,
            seed,
            model: ModelConfig {
                layers: 2,
                hidden: 16,
                heads: 2,
                ffn: 32,
                vocab: 64,
                max_positions: 16,
                pool_layer: default_pool_layer(2),
            },
            init_std: 0.3,
            mask_prob: 0.4,
            step: 1e-5,
            coords: 0,
        }
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, vocab: usize) -> EncodedSequence {
    let n = rng.random_range(3..=6);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(NUM_SPECIAL..vocab)).collect();
    EncodedSequence::from_segments(&[&ids], 8)
}

/// Compares the backpropagated gradient of the MLM+SEQ+TLM loss against
/// central differences on random pairs and random weights.
pub fn combined_gradient_check(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let cfg = &setup.model;
    cfg.validate()?;
    if setup.pairs == 0 {
        return Err(Error::InvalidArgument("gradient check needs at least one pair".into()));
    }
    if cfg.vocab <= NUM_SPECIAL || cfg.max_positions < 16 {
        return Err(Error::InvalidArgument(format!("model too small for the check: {cfg}")));
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend((NUM_SPECIAL..cfg.vocab).map(|i| format!("t{i}")));
    let vocab = Vocab::from_tokens(tokens)?;

    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let params = Parameters::init(cfg, setup.init_std, &mut rng)?;
    let batch = PairBatch::new(
        (0..setup.pairs)
            .map(|_| EncodedPair {
                orig: random_sequence(&mut rng, cfg.vocab),
                latn: random_sequence(&mut rng, cfg.vocab),
            })
            .collect(),
    );
    let hyper = LossHyper {
        mask_prob: setup.mask_prob,
        temperature: 1.0,
        max_len: 16,
    };
    let prepared = prepare_batch(&batch, Objectives::FULL, &hyper, &vocab, &mut rng);

    let mut g = Graph::new();
    let w = params.bind(&mut g, true);
    let loss = combined_loss(&mut g, &w, cfg, &prepared, Objectives::FULL, 1.0)?;
    g.backward(loss.total)?;
    let mut with_grads = params.clone();
    with_grads.zero_grads();
    with_grads.accumulate_grads(&w, &g, 1.0);
    let analytic = with_grads.flat_grads();

    let theta = params.flatten();
    let count = if setup.coords == 0 { theta.len() } else { setup.coords };
    let coords = sample_coords(theta.len(), count, setup.seed);
    let mut probe = params.clone();
    let mut failure = None;
    let report = finite_diff_check(
        |t| match total_at(&mut probe, t, cfg, &prepared) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &theta,
        &analytic,
        setup.step,
        &coords,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn total_at(probe: &mut Parameters, theta: &[f64], cfg: &ModelConfig, batch: &PreparedBatch) -> Result<f64> {
    probe.assign_flat(theta)?;
    let mut g = Graph::new();
    let w = probe.bind(&mut g, false);
    let loss = combined_loss(&mut g, &w, cfg, batch, Objectives::FULL, 1.0)?;
    Ok(g.value(loss.total).item())
}
