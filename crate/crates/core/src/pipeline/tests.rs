use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{save_params, ModelConfig, Parameters};
use crate::numcore::Tensor;
use crate::objectives::{prepare_batch, Objectives, PreparedBatch};
use crate::synth::{cipher_corpus, CipherAlphabet};
use crate::tokenizer::{mask_tokens, train_vocab_from_lines, EncodedSequence, MaskedBatch};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn sample_sizes_follow_fraction_and_floor() {
    assert_eq!(sample_size(200_000, 0.1, 10_000).unwrap(), 20_000);
    assert_eq!(sample_size(50_000, 0.1, 10_000).unwrap(), 10_000);
    assert_eq!(sample_size(5_000, 0.1, 10_000).unwrap(), 5_000);
    assert_eq!(sample_size(7, 0.5, 0).unwrap(), 4);
    assert_eq!(sample_size(0, 0.5, 3).unwrap(), 0);
    assert!(sample_size(10, 0.0, 1).is_err());
    assert!(sample_size(10, 1.5, 1).is_err());
}

#[test]
fn sampled_lines_keep_order_and_are_reproducible() {
    let lines: Vec<usize> = (0..50_000).collect();
    let a = sample_corpus(&lines, 0.1, 10_000, &mut rng(3)).unwrap();
    let b = sample_corpus(&lines, 0.1, 10_000, &mut rng(3)).unwrap();
    assert_eq!(a.len(), 10_000);
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    let c = sample_corpus(&lines, 0.1, 10_000, &mut rng(4)).unwrap();
    assert_ne!(a, c);
    let all = sample_corpus(&lines[..5_000], 0.1, 10_000, &mut rng(3)).unwrap();
    assert_eq!(all, &lines[..5_000]);
}

#[test]
fn sampling_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let text: String = (0..30).map(|i| format!("line {i}\n")).collect();
    fs::write(&path, text).unwrap();
    let s = sample_corpus_file(&path, 0.2, 0, &mut rng(1)).unwrap();
    assert_eq!(s.len(), 6);
    assert!(s.iter().all(|l| l.starts_with("line ")));
    assert!(sample_corpus_file(dir.path().join("missing"), 0.2, 0, &mut rng(1)).is_err());
}

fn small_vocab() -> Vocab {
    train_vocab_from_lines(["the cat sat", "αβγ δεζ", "abg dez", "on the mat"], 60).unwrap()
}

#[test]
fn pairs_from_lines() {
    let v = small_vocab();
    let table = RuleTable::builtin("grek").unwrap();
    let pc = build_pairs_from_lines(&["the cat", "", "αβγ", "   "], &table, &v, 12);
    assert_eq!(pc.skipped, 2);
    assert_eq!(pc.pairs.len(), 2);
    assert_eq!(pc.pairs[0].orig, pc.pairs[0].latn);
    assert_eq!(pc.pairs[1].orig, encode("αβγ", &v, 12));
    assert_eq!(pc.pairs[1].latn, encode(&romanize("αβγ", &table), &v, 12));
    assert_ne!(pc.pairs[1].orig, pc.pairs[1].latn);
    let empty: [&str; 0] = [];
    assert_eq!(build_pairs_from_lines(&empty, &table, &v, 12), PairCorpus::default());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.txt");
    fs::write(&path, "").unwrap();
    assert!(build_pair_corpus(&path, &table, &v, 12).unwrap().pairs.is_empty());
}

#[test]
fn linear_schedule() {
    assert_eq!(linear_lr(0, 10, 3e-4).unwrap(), 3e-4);
    assert_eq!(linear_lr(10, 10, 3e-4).unwrap(), 0.0);
    assert_eq!(linear_lr(5, 10, 3e-4).unwrap(), 1.5e-4);
    assert!(linear_lr(0, 0, 1.0).is_err());
    assert!(linear_lr(11, 10, 1.0).is_err());
}

fn scalar_param(value: f64, grad: f64) -> Tensor {
    let mut t = Tensor::scalar(value);
    t.grad = Some(vec![grad]);
    t
}

#[test]
fn adamw_decay_alone() {
    let mut t = scalar_param(1.0, 0.0);
    let mut opt = AdamW::for_tensors(&[&t], 0.9, 0.999, 1e-8, 0.01);
    opt.step_tensors(vec![&mut t], 0.1).unwrap();
    assert_eq!(t.item(), 0.999);
    assert_eq!(opt.t, 1);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut t = scalar_param(0.0, 1.0);
    let mut opt = AdamW::for_tensors(&[&t], 0.9, 0.999, 1e-8, 0.01);
    opt.step_tensors(vec![&mut t], 2e-5).unwrap();
    let expected = -2e-5 / (1.0 + 1e-8);
    assert!((t.item() - expected).abs() < 1e-20, "{}", t.item());
}

#[test]
fn adamw_second_step_matches_hand_evaluation() {
    let mut t = scalar_param(0.5, 2.0);
    let mut opt = AdamW::for_tensors(&[&t], 0.9, 0.999, 1e-8, 0.0);
    opt.step_tensors(vec![&mut t], 0.01).unwrap();
    t.grad = Some(vec![-1.0]);
    opt.step_tensors(vec![&mut t], 0.01).unwrap();
    let (m1, v1) = (0.2, 0.004);
    let (m2, v2) = (0.9 * m1 - 0.1, 0.999 * v1 + 0.001 * 1.0);
    let mhat = m2 / (1.0 - 0.81);
    let vhat = v2 / (1.0 - 0.999f64 * 0.999);
    let first = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
    let expected = first - 0.01 * mhat / (vhat.sqrt() + 1e-8);
    assert!((t.item() - expected).abs() < 1e-15);
}

#[test]
fn adamw_requires_gradients() {
    let c = ModelConfig {
        layers: 1,
        hidden: 4,
        heads: 1,
        ffn: 4,
        vocab: 8,
        max_positions: 6,
        pool_layer: 1,
    };
    let mut p = Parameters::init(&c, 0.1, &mut rng(0)).unwrap();
    let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
    let err = opt.step(&mut p, 0.1).unwrap_err().to_string();
    assert!(err.contains("token_embedding"), "{err}");
    let mut other = Tensor::zeros(&[3]);
    other.grad = Some(vec![0.0; 3]);
    assert!(opt.step_tensors(vec![&mut other], 0.1).is_err());
}

#[test]
fn config_files_override_the_profile() {
    let c = TrainConfig::parse_over(TrainConfig::desk(), "# tweak\nlr=0.001\nepochs = 3\n", "x").unwrap();
    assert_eq!(c.lr, 0.001);
    assert_eq!(c.epochs, 3);
    assert_eq!(c.batch_size, TrainConfig::desk().batch_size);
    assert!(TrainConfig::parse_over(TrainConfig::desk(), "learning_rate=1", "x").is_err());
    assert!(TrainConfig::parse_over(TrainConfig::desk(), "epochs=0", "x").is_err());
    assert!(TrainConfig::parse_over(TrainConfig::desk(), "lr=fast", "x").is_err());
    for base in [TrainConfig::desk(), TrainConfig::paper()] {
        base.validate().unwrap();
        let round = TrainConfig::parse_over(TrainConfig::desk(), &base.to_kv(), "x").unwrap();
        assert_eq!(round, base);
    }
    let p = TrainConfig::paper();
    assert_eq!(
        (p.lr, p.max_len, p.checkpoint_every, p.mask_prob),
        (2e-5, 512, 2000, 0.15)
    );
    assert_eq!(p.batch_size * p.grad_accum, 512);
    assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
    assert!("huge".parse::<Profile>().is_err());
}

struct Fixture {
    vocab: Vocab,
    model: ModelConfig,
    pairs: Vec<EncodedPair>,
}

fn fixture(n: usize) -> Fixture {
    let corpus = cipher_corpus(n, 5, &[CipherAlphabet::Lower]).unwrap();
    let lines: Vec<&str> = corpus.latin.iter().chain(&corpus.cipher).map(String::as_str).collect();
    let vocab = train_vocab_from_lines(lines, 120).unwrap();
    let table = RuleTable::builtin("cipher").unwrap();
    let pairs = build_pairs_from_lines(&corpus.cipher, &table, &vocab, 24).pairs;
    let model = ModelConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab: vocab.len(),
        max_positions: 24,
        pool_layer: 1,
    };
    Fixture { vocab, model, pairs }
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        max_len: 24,
        batch_size: 4,
        epochs: 3,
        checkpoint_every: 4,
        ..TrainConfig::desk()
    }
}

#[test]
fn accumulation_matches_one_large_batch() {
    let f = fixture(4);
    // Equal-length sequences fully masked give equal mask counts per micro-batch.
    let mut r = rng(9);
    let pairs: Vec<EncodedPair> = (0..4)
        .map(|i| {
            let ids = [10 + i, 20 + i, 30 + 2 * i];
            let orig = EncodedSequence::from_segments(&[&ids], 12);
            let latn = EncodedSequence::from_segments(&[&ids[..2], &[40 + i]], 12);
            EncodedPair { orig, latn }
        })
        .collect();
    let masked = |side: fn(&EncodedPair) -> &EncodedSequence, r: &mut ChaCha8Rng| -> MaskedBatch {
        MaskedBatch {
            sequences: pairs.iter().map(|p| mask_tokens(side(p), 1.0, &f.vocab, r)).collect(),
        }
    };
    let orig = masked(|p| &p.orig, &mut r);
    let latn = masked(|p| &p.latn, &mut r);
    let slice = |b: &MaskedBatch, range: std::ops::Range<usize>| MaskedBatch {
        sequences: b.sequences[range].to_vec(),
    };
    let part = |range: std::ops::Range<usize>| PreparedBatch {
        mlm_orig: slice(&orig, range.clone()),
        mlm_latn: slice(&latn, range.clone()),
        clean: PairBatch::new(pairs[range].to_vec()),
        tlm: MaskedBatch::default(),
    };
    let params = Parameters::init(&f.model, 0.3, &mut rng(2)).unwrap();
    let cfg = small_train_config();
    let mut one = Trainer::new(params.clone(), f.model.clone(), cfg.clone(), Objectives::MLM, 10).unwrap();
    let mut two = Trainer::new(params, f.model.clone(), cfg, Objectives::MLM, 10).unwrap();
    let l1 = one.gradients(&[part(0..4)]).unwrap();
    let l2 = two.gradients(&[part(0..2), part(2..4)]).unwrap();
    assert!((l1.total - l2.total).abs() < 1e-10);
    let (g1, g2) = (one.params.flat_grads(), two.params.flat_grads());
    let worst = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max gradient difference {worst}");
}

#[test]
fn non_finite_loss_names_the_component() {
    let f = fixture(4);
    let mut params = Parameters::init(&f.model, 0.1, &mut rng(2)).unwrap();
    params.token_embedding.data_mut().fill(f64::NAN);
    let batch = PairBatch::new(f.pairs.clone());
    let cfg = small_train_config();
    let prepared = prepare_batch(&batch, Objectives::FULL, &cfg.loss_hyper(), &f.vocab, &mut rng(1));
    let mut t = Trainer::new(params, f.model.clone(), cfg, Objectives::FULL, 5).unwrap();
    let err = t.step(&[prepared]).unwrap_err();
    assert!(err.is_numeric());
    assert!(err.to_string().contains("mlm_orig"), "{err}");
    assert!(err.to_string().contains("step 1"), "{err}");
}

#[test]
fn training_run_layout_and_log() {
    let f = fixture(10);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config();
    let params = Parameters::init(&f.model, cfg.init_std, &mut rng(cfg.seed)).unwrap();
    let report = train(
        params,
        &f.model,
        &f.pairs,
        &f.vocab,
        &cfg,
        Objectives::FULL,
        dir.path(),
        |_| {},
    )
    .unwrap();
    // 10 pairs in micro-batches of 4: 3 steps per epoch, 9 in total.
    assert_eq!(steps_per_epoch(10, &cfg), 3);
    assert_eq!(report.steps, 9);
    assert_eq!(report.log.len(), 9);
    assert_eq!(report.checkpoints.len(), 9 / cfg.checkpoint_every + 1);
    let names: Vec<String> = report
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step-000004", "step-000008", "step-000009"]);
    let last = crate::encoder::load_checkpoint(&report.checkpoints[2]).unwrap();
    assert_eq!(last.step, 9);
    assert_eq!(last.params, report.params);

    let lrs: Vec<f64> = report.log.iter().map(|r| r.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*lrs.last().unwrap(), 0.0);
    for row in &report.log {
        let sum: f64 = row.loss.components().iter().map(|(_, v)| v).sum();
        assert!((sum - row.loss.total).abs() < 1e-12);
        assert!(row.loss.seq.is_some() && row.loss.tlm.is_some());
    }
    let logged = read_loss_log(dir.path().join("loss_log.csv")).unwrap();
    assert_eq!(logged, report.log);
    let saved = TrainConfig::load_over(TrainConfig::desk(), dir.path().join("train_config.txt")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn disabled_terms_are_blank_in_the_log() {
    let f = fixture(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..small_train_config()
    };
    let params = Parameters::init(&f.model, cfg.init_std, &mut rng(1)).unwrap();
    train(
        params,
        &f.model,
        &f.pairs,
        &f.vocab,
        &cfg,
        Objectives::MLM_SEQ,
        dir.path(),
        |_| {},
    )
    .unwrap();
    let text = fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,mlm_orig,mlm_latn,seq,tlm,total"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    assert!(!row[4].is_empty());
    assert!(row[5].is_empty());
}

#[test]
fn training_is_bit_reproducible() {
    let f = fixture(10);
    let cfg = TrainConfig {
        grad_accum: 2,
        ..small_train_config()
    };
    let run = |dir: &std::path::Path| {
        let params = Parameters::init(&f.model, cfg.init_std, &mut rng(cfg.seed)).unwrap();
        train(
            params,
            &f.model,
            &f.pairs,
            &f.vocab,
            &cfg,
            Objectives::FULL,
            dir,
            |_| {},
        )
        .unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert_eq!(ra.checkpoints.len(), rb.checkpoints.len());
    for (x, y) in ra.checkpoints.iter().zip(&rb.checkpoints) {
        for entry in fs::read_dir(x).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(x.join(&name)).unwrap(),
                fs::read(y.join(&name)).unwrap(),
                "{name:?}"
            );
        }
    }
    assert_eq!(
        fs::read(a.path().join("loss_log.csv")).unwrap(),
        fs::read(b.path().join("loss_log.csv")).unwrap()
    );
}

#[test]
fn training_rejects_bad_inputs() {
    let f = fixture(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train_config();
    let params = Parameters::init(&f.model, 0.05, &mut rng(1)).unwrap();
    let go = |pairs: &[EncodedPair], cfg: &TrainConfig| {
        train(
            params.clone(),
            &f.model,
            pairs,
            &f.vocab,
            cfg,
            Objectives::MLM,
            dir.path(),
            |_| {},
        )
    };
    assert!(go(&[], &cfg).is_err());
    assert!(go(
        &f.pairs,
        &TrainConfig {
            max_len: 64,
            ..cfg.clone()
        }
    )
    .is_err());
    assert!(go(
        &f.pairs,
        &TrainConfig {
            batch_size: 0,
            ..cfg.clone()
        }
    )
    .is_err());
}

#[test]
fn checkpoint_selection() {
    let f = fixture(40);
    let dir = tempfile::tempdir().unwrap();
    let dev = PairBatch::new(f.pairs[30..].to_vec());
    let random = Parameters::init(&f.model, 0.05, &mut rng(1)).unwrap();
    let save = |p: &Parameters, step: usize| {
        let path = dir.path().join(checkpoint_name(step));
        save_params(p, &f.model, step, &path).unwrap();
        path
    };

    let only = save(&random, 7);
    let s = select_best_checkpoint(std::slice::from_ref(&only), &dev, 3).unwrap();
    assert_eq!(s.best, only);
    assert_eq!(s.scores.len(), 1);

    // Equal scores: the earlier step wins regardless of list order.
    let late = save(&random, 9);
    let early = save(&random, 2);
    let s = select_best_checkpoint(&[late.clone(), early.clone()], &dev, 3).unwrap();
    assert_eq!(s.scores[0].accuracy, s.scores[1].accuracy);
    assert_eq!(s.best, early);

    let cfg = TrainConfig {
        max_len: 24,
        batch_size: 8,
        epochs: 25,
        checkpoint_every: 1000,
        lr: 3e-3,
        ..TrainConfig::desk()
    };
    let out = dir.path().join("run");
    let report = train(
        random.clone(),
        &f.model,
        &f.pairs[..30],
        &f.vocab,
        &cfg,
        Objectives::MLM_SEQ,
        &out,
        |_| {},
    )
    .unwrap();
    let trained = report.checkpoints.last().unwrap().clone();
    let s = select_best_checkpoint(&[early.clone(), trained.clone()], &dev, 1).unwrap();
    assert!(s.scores[1].accuracy > s.scores[0].accuracy, "{:?}", s.scores);
    assert_eq!(s.best, trained);

    assert!(select_best_checkpoint(&[], &dev, 1).is_err());
    assert!(select_best_checkpoint(&[early], &PairBatch::new(f.pairs[..1].to_vec()), 1).is_err());
}
