use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use romalign::encoder::{load_checkpoint, ModelConfig, Parameters};
use romalign::evalsuite::{
    ablation_report, finetune_classifier, finetune_tagger, load_labeled, load_tagged, retrieval_topk,
    sentence_embeddings, vocab_coverage_files, EvalTask, FinetuneConfig,
};
use romalign::objectives::{combined_gradient_check, GradCheckSetup, Objectives};
use romalign::pipeline::{
    build_pair_corpus, checkpoint_name, sample_corpus_file, select_best_checkpoint, train, TrainConfig,
};
use romalign::synth::{cipher_corpus, CipherAlphabet};
use romalign::textio::{read_lines, write_lines};
use romalign::tokenizer::{encode, train_vocab, Vocab};
use romalign::translit::{detect_script, romanize_corpus, RuleTable};
use romalign::Error;

use crate::{
    AblateArgs, AlphabetArg, BuildPairsArgs, ClassifyArgs, Cli, Command, CoverageArgs, DetectArgs, Failure,
    FinetuneArgs, GradcheckArgs, RetrievalArgs, RomanizeArgs, SampleArgs, SelectArgs, SynthArgs, TagArgs, TrainArgs,
    TrainVocabArgs,
};

type Outcome = Result<(), Failure>;

/// Prints the resolved settings of a run to standard error.
fn echo(verb: &str, seed: u64, settings: &[(&str, &dyn Display)]) {
    eprintln!("romalign {verb}");
    eprintln!("  seed = {seed}");
    for (k, v) in settings {
        eprintln!("  {k} = {v}");
    }
}

fn shown(p: &Path) -> std::path::Display<'_> {
    p.display()
}

fn joined<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn spaced(ids: &[usize]) -> String {
    ids.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn joined_paths(items: &[PathBuf]) -> String {
    items
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| {
        Failure::Data(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

pub fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Romanize(a) => romanize(a, seed),
        Command::DetectScript(a) => detect(a, seed),
        Command::Sample(a) => sample(a, seed),
        Command::TrainVocab(a) => vocab(a, seed),
        Command::BuildPairs(a) => build_pairs(a, seed),
        Command::Train(a) => run_train(a, seed),
        Command::SelectCheckpoint(a) => select(a, seed),
        Command::EvalRetrieval(a) => eval_retrieval(a, seed),
        Command::EvalClassify(a) => eval_classify(a, seed),
        Command::EvalTag(a) => eval_tag(a, seed),
        Command::VocabCoverage(a) => coverage(a, seed),
        Command::Ablate(a) => ablate(a, seed),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Synth(a) => synth(a, seed),
    }
}

fn romanize(a: RomanizeArgs, seed: u64) -> Outcome {
    echo(
        "romanize",
        seed,
        &[
            ("rules", &a.rules),
            ("in", &shown(&a.input)),
            ("out", &shown(&a.output)),
        ],
    );
    let table = RuleTable::resolve(&a.rules)?;
    let n = romanize_corpus(&a.input, &table, &a.output)?;
    println!("romanized {n} lines into {}", a.output.display());
    Ok(())
}

fn detect(a: DetectArgs, seed: u64) -> Outcome {
    match (a.input, a.text) {
        (_, Some(text)) => {
            echo("detect-script", seed, &[("text", &text)]);
            println!("{}", detect_script(&text));
        }
        (Some(path), None) => {
            echo("detect-script", seed, &[("in", &shown(&path))]);
            for line in read_lines(&path)? {
                println!("{}", detect_script(&line));
            }
        }
        (None, None) => return Err(Failure::Usage("pass --in or --text".into())),
    }
    Ok(())
}

fn sample(a: SampleArgs, seed: u64) -> Outcome {
    echo(
        "sample",
        seed,
        &[
            ("in", &shown(&a.input)),
            ("out", &shown(&a.output)),
            ("fraction", &a.fraction),
            ("floor", &a.floor),
        ],
    );
    let kept = sample_corpus_file(&a.input, a.fraction, a.floor, &mut ChaCha8Rng::seed_from_u64(seed))?;
    write_lines(&a.output, &kept)?;
    println!("kept {} lines", kept.len());
    Ok(())
}

fn vocab(a: TrainVocabArgs, seed: u64) -> Outcome {
    echo(
        "train-vocab",
        seed,
        &[
            ("corpus", &joined_paths(&a.corpus)),
            ("size", &a.size),
            ("out", &shown(&a.output)),
        ],
    );
    let v = train_vocab(&a.corpus, a.size)?;
    v.save(&a.output)?;
    println!("{} tokens written to {}", v.len(), a.output.display());
    Ok(())
}

fn build_pairs(a: BuildPairsArgs, seed: u64) -> Outcome {
    echo(
        "build-pairs",
        seed,
        &[
            ("in", &shown(&a.input)),
            ("rules", &a.rules),
            ("vocab", &shown(&a.vocab)),
            ("max_len", &a.max_len),
            ("out", &shown(&a.output)),
        ],
    );
    let table = RuleTable::resolve(&a.rules)?;
    let vocab = Vocab::load(&a.vocab)?;
    let corpus = build_pair_corpus(&a.input, &table, &vocab, a.max_len)?;
    let rows: Vec<String> = corpus
        .pairs
        .iter()
        .map(|p| format!("{}\t{}", spaced(&p.orig.ids), spaced(&p.latn.ids)))
        .collect();
    write_lines(&a.output, &rows)?;
    println!("{} pairs written, {} blank lines skipped", rows.len(), corpus.skipped);
    Ok(())
}

fn run_train(a: TrainArgs, seed: u64) -> Outcome {
    let mut config = TrainConfig::profile(a.profile.into());
    if let Some(path) = &a.config {
        config = TrainConfig::load_over(config, path)?;
    }
    config.seed = seed;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.validate()?;
    let toggles: Objectives = a.objectives.into();
    let vocab = Vocab::load(&a.vocab)?;
    let (params, model) = match &a.init {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            (ck.params, ck.config)
        }
        None => {
            let model = match &a.model_config {
                Some(path) => ModelConfig::load(path)?,
                None => ModelConfig {
                    max_positions: config.max_len,
                    ..ModelConfig::desk(vocab.len())
                },
            };
            model.validate()?;
            let params = Parameters::init(&model, config.init_std, &mut ChaCha8Rng::seed_from_u64(seed))?;
            (params, model)
        }
    };
    let init = a
        .init
        .as_ref()
        .map_or_else(|| "random".to_string(), |p| p.display().to_string());
    echo(
        "train",
        seed,
        &[
            ("corpus", &shown(&a.corpus)),
            ("rules", &a.rules),
            ("vocab", &shown(&a.vocab)),
            ("out", &shown(&a.output)),
            ("objectives", &toggles),
            ("profile", &Into::<romalign::pipeline::Profile>::into(a.profile)),
            ("init", &init),
        ],
    );
    for line in config.to_kv().lines().chain(model.to_kv().lines()) {
        eprintln!("  {line}");
    }

    let table = RuleTable::resolve(&a.rules)?;
    let corpus = build_pair_corpus(&a.corpus, &table, &vocab, config.max_len)?;
    let every = a.log_every.max(1);
    let report = train(
        params,
        &model,
        &corpus.pairs,
        &vocab,
        &config,
        toggles,
        &a.output,
        |row| {
            if row.step % every == 0 {
                println!("step {:>6}  lr {:.3e}  loss {:.4}", row.step, row.lr, row.loss.total);
            }
        },
    )?;
    println!("{} updates; checkpoints:", report.steps);
    for c in &report.checkpoints {
        println!("  {}", c.display());
    }
    Ok(())
}

/// Every `step-*` directory of a run, in step order.
fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(run).map_err(|e| {
        Failure::Data(Error::Io {
            path: run.to_path_buf(),
            source: e,
        })
    })?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("step-")))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Failure::Data(Error::Empty(format!(
            "no {}-style checkpoints under {}",
            checkpoint_name(0),
            run.display()
        ))));
    }
    Ok(found)
}

fn select(a: SelectArgs, seed: u64) -> Outcome {
    let mut candidates = a.checkpoint.clone();
    if let Some(run) = &a.run {
        candidates.extend(run_checkpoints(run)?);
    }
    echo(
        "select-checkpoint",
        seed,
        &[
            ("checkpoints", &joined_paths(&candidates)),
            ("dev", &shown(&a.dev)),
            ("rules", &a.rules),
            ("vocab", &shown(&a.vocab)),
            ("k", &a.k),
            ("max_len", &a.max_len),
        ],
    );
    let table = RuleTable::resolve(&a.rules)?;
    let vocab = Vocab::load(&a.vocab)?;
    let dev = build_pair_corpus(&a.dev, &table, &vocab, a.max_len)?;
    let sel = select_best_checkpoint(&candidates, &dev.batch(), a.k)?;
    println!("checkpoint,step,accuracy");
    for s in &sel.scores {
        println!("{},{},{:.4}", s.path.display(), s.step, s.accuracy);
    }
    println!("best: {}", sel.best.display());
    Ok(())
}

fn eval_retrieval(a: RetrievalArgs, seed: u64) -> Outcome {
    echo(
        "eval-retrieval",
        seed,
        &[
            ("checkpoint", &shown(&a.checkpoint)),
            ("vocab", &shown(&a.vocab)),
            ("source", &shown(&a.source)),
            ("target", &shown(&a.target)),
            ("k", &a.k),
            ("max_len", &a.max_len),
        ],
    );
    let ck = load_checkpoint(&a.checkpoint)?;
    let vocab = Vocab::load(&a.vocab)?;
    let src = read_lines(&a.source)?;
    let tgt = read_lines(&a.target)?;
    if src.len() != tgt.len() {
        return Err(Failure::Data(Error::InvalidArgument(format!(
            "{} has {} lines but {} has {}",
            a.source.display(),
            src.len(),
            a.target.display(),
            tgt.len()
        ))));
    }
    let max_len = a.max_len.min(ck.config.max_positions);
    let embed = |lines: &[String]| {
        let seqs: Vec<_> = lines.iter().map(|l| encode(l, &vocab, max_len)).collect();
        let refs: Vec<_> = seqs.iter().collect();
        sentence_embeddings(&ck.params, &ck.config, &refs, ck.config.pool_layer)
    };
    let r = retrieval_topk(&embed(&src)?, &embed(&tgt)?, a.k)?;
    let hits = r.hits.iter().filter(|&&h| h).count();
    println!("top-{} accuracy {:.4} ({hits}/{})", r.k, r.accuracy, r.queries);
    if r.degenerate > 0 {
        println!("{} degenerate queries scored as misses", r.degenerate);
    }
    Ok(())
}

/// Runs `f` once per seed on up to `jobs` threads, keeping seed order.
fn per_seed<T: Send>(
    seeds: &[u64],
    jobs: usize,
    f: impl Fn(u64) -> romalign::Result<T> + Sync,
) -> romalign::Result<Vec<T>> {
    let per_job = seeds.len().div_ceil(jobs.clamp(1, seeds.len().max(1)));
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(per_job.max(1))
            .map(|chunk| s.spawn(move || chunk.iter().map(|&seed| f(seed)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}

fn finetune_settings(a: &FinetuneArgs, seeds: &[u64]) -> [(&'static str, String); 7] {
    [
        ("checkpoint", a.checkpoint.display().to_string()),
        ("vocab", a.vocab.display().to_string()),
        ("train", a.train.display().to_string()),
        ("val", a.val.display().to_string()),
        ("test", joined_paths(&a.test)),
        ("seeds", joined(seeds)),
        ("jobs", a.jobs.to_string()),
    ]
}

fn report_scores(a: &FinetuneArgs, seeds: &[u64], scores: &[Vec<f64>]) -> Outcome {
    let mut csv = String::from("test,seed,macro_f1\n");
    for (seed, row) in seeds.iter().zip(scores) {
        for (test, f1) in a.test.iter().zip(row) {
            csv.push_str(&format!("{},{seed},{f1:.6}\n", stem(test)));
        }
    }
    for (i, test) in a.test.iter().enumerate() {
        let mean = scores.iter().map(|r| r[i]).sum::<f64>() / scores.len() as f64;
        println!("{:<24} macro-F1 {:.4}", stem(test), mean);
    }
    if let Some(path) = &a.csv {
        write_text(path, &csv)?;
    }
    Ok(())
}

fn print_settings(verb: &str, seed: u64, settings: &[(&str, String)]) {
    let refs: Vec<(&str, &dyn Display)> = settings.iter().map(|(k, v)| (*k, v as &dyn Display)).collect();
    echo(verb, seed, &refs);
}

fn eval_classify(a: ClassifyArgs, seed: u64) -> Outcome {
    let c = &a.common;
    let seeds = if c.seeds.is_empty() {
        vec![seed]
    } else {
        c.seeds.clone()
    };
    let fc = FinetuneConfig::preset(&a.preset)?;
    let mut settings = finetune_settings(c, &seeds).to_vec();
    settings.push(("preset", a.preset.clone()));
    settings.push(("config", format!("{fc:?}")));
    print_settings("eval-classify", seed, &settings);

    let ck = load_checkpoint(&c.checkpoint)?;
    let vocab = Vocab::load(&c.vocab)?;
    let train = load_labeled(&c.train)?;
    let val = load_labeled(&c.val)?;
    let tests = c.test.iter().map(load_labeled).collect::<romalign::Result<Vec<_>>>()?;
    let scores = per_seed(&seeds, c.jobs, |s| {
        let model = finetune_classifier(
            &ck.params,
            &ck.config,
            &vocab,
            &train,
            &val,
            &FinetuneConfig { seed: s, ..fc.clone() },
        )?;
        tests.iter().map(|t| model.evaluate(&vocab, t)).collect()
    })?;
    report_scores(c, &seeds, &scores)
}

fn eval_tag(a: TagArgs, seed: u64) -> Outcome {
    let c = &a.common;
    let seeds = if c.seeds.is_empty() {
        vec![seed]
    } else {
        c.seeds.clone()
    };
    let fc = FinetuneConfig::preset(&a.preset)?;
    let train = load_tagged(&c.train)?;
    let tagset = if a.tagset.is_empty() {
        train
            .iter()
            .flat_map(|s| s.tags.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        a.tagset.clone()
    };
    let mut settings = finetune_settings(c, &seeds).to_vec();
    settings.push(("preset", a.preset.clone()));
    settings.push(("tagset", joined(&tagset)));
    settings.push(("config", format!("{fc:?}")));
    print_settings("eval-tag", seed, &settings);

    let ck = load_checkpoint(&c.checkpoint)?;
    let vocab = Vocab::load(&c.vocab)?;
    let val = load_tagged(&c.val)?;
    let tests = c.test.iter().map(load_tagged).collect::<romalign::Result<Vec<_>>>()?;
    let scores = per_seed(&seeds, c.jobs, |s| {
        let model = finetune_tagger(
            &ck.params,
            &ck.config,
            &vocab,
            &train,
            &val,
            &tagset,
            &FinetuneConfig { seed: s, ..fc.clone() },
        )?;
        tests.iter().map(|t| model.evaluate(&vocab, t)).collect()
    })?;
    report_scores(c, &seeds, &scores)
}

fn coverage(a: CoverageArgs, seed: u64) -> Outcome {
    echo(
        "vocab-coverage",
        seed,
        &[("vocab", &shown(&a.vocab)), ("corpus", &joined_paths(&a.corpus))],
    );
    let vocab = Vocab::load(&a.vocab)?;
    println!("corpus,unique_tokens");
    for path in &a.corpus {
        println!("{},{}", path.display(), vocab_coverage_files(&[path], &vocab)?);
    }
    Ok(())
}

fn ablate(a: AblateArgs, seed: u64) -> Outcome {
    let seeds = if a.seeds.is_empty() {
        vec![seed]
    } else {
        a.seeds.clone()
    };
    let combos = vec![
        (Objectives::MLM, a.mlm.clone()),
        (Objectives::MLM_SEQ, a.mlm_seq.clone()),
        (Objectives::MLM_TLM, a.mlm_tlm.clone()),
        (Objectives::FULL, a.full.clone()),
    ];
    let mut settings = vec![("baseline", a.baseline.display().to_string())];
    for (o, p) in &combos {
        settings.push((o.label(), p.display().to_string()));
    }
    settings.extend([
        ("vocab", a.vocab.display().to_string()),
        ("retrieval", a.retrieval.join(" ")),
        ("k", a.k.to_string()),
        ("max_len", a.max_len.to_string()),
        ("seeds", joined(&seeds)),
        ("jobs", a.jobs.to_string()),
    ]);
    print_settings("ablate", seed, &settings);

    let vocab = Vocab::load(&a.vocab)?;
    let mut tasks = Vec::new();
    for spec in &a.retrieval {
        let (src, tgt) = spec
            .split_once(',')
            .ok_or_else(|| Failure::Usage(format!("--retrieval expects SOURCE,TARGET, got {spec:?}")))?;
        let (src, tgt) = (Path::new(src), Path::new(tgt));
        let encode_all = |p: &Path| -> romalign::Result<Vec<_>> {
            Ok(read_lines(p)?.iter().map(|l| encode(l, &vocab, a.max_len)).collect())
        };
        tasks.push(EvalTask::Retrieval {
            source: stem(src),
            target: stem(tgt),
            queries: encode_all(src)?,
            candidates: encode_all(tgt)?,
            k: a.k,
        });
    }
    if let (Some(train), Some(val)) = (&a.classify_train, &a.classify_val) {
        tasks.push(EvalTask::Classify {
            source: stem(train),
            train: load_labeled(train)?,
            val: load_labeled(val)?,
            tests: a
                .classify_test
                .iter()
                .map(|p| Ok((stem(p), load_labeled(p)?)))
                .collect::<romalign::Result<_>>()?,
            config: FinetuneConfig::preset(&a.classify_preset)?,
        });
    }
    if let (Some(train), Some(val)) = (&a.tag_train, &a.tag_val) {
        let train_set = load_tagged(train)?;
        let tagset = train_set
            .iter()
            .flat_map(|s| s.tags.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        tasks.push(EvalTask::Tag {
            source: stem(train),
            train: train_set,
            val: load_tagged(val)?,
            tests: a
                .tag_test
                .iter()
                .map(|p| Ok((stem(p), load_tagged(p)?)))
                .collect::<romalign::Result<_>>()?,
            tagset,
            config: FinetuneConfig::preset(&a.tag_preset)?,
        });
    }
    if tasks.is_empty() {
        return Err(Failure::Usage(
            "no tasks: pass --retrieval, --classify-* or --tag-*".into(),
        ));
    }
    let report = ablation_report(&a.baseline, &combos, &tasks, &vocab, &seeds, a.jobs)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Outcome {
    let mut setup = GradCheckSetup::small(a.pairs, seed);
    setup.coords = a.coords;
    echo(
        "gradcheck",
        seed,
        &[
            ("pairs", &a.pairs),
            ("coords", &a.coords),
            ("tolerance", &a.tolerance),
            ("model", &setup.model),
            ("init_std", &setup.init_std),
            ("step", &setup.step),
        ],
    );
    let report = combined_gradient_check(&setup)?;
    println!(
        "max relative error {:.3e} over {} coordinates",
        report.max_rel_error, report.coords_checked
    );
    if report.max_rel_error < a.tolerance {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: {:.3e} >= {:.1e} at coordinate {:?}",
            report.max_rel_error, a.tolerance, report.worst_coord
        )))
    }
}

fn synth(a: SynthArgs, seed: u64) -> Outcome {
    let alphabets: &[CipherAlphabet] = match a.alphabet {
        AlphabetArg::Lower => &[CipherAlphabet::Lower],
        AlphabetArg::Upper => &[CipherAlphabet::Upper],
        AlphabetArg::Both => &[CipherAlphabet::Lower, CipherAlphabet::Upper],
    };
    echo(
        "synth",
        seed,
        &[
            ("sentences", &a.sentences),
            ("alphabet", &format!("{:?}", a.alphabet).to_lowercase()),
            ("latin_out", &shown(&a.latin_out)),
            ("cipher_out", &shown(&a.cipher_out)),
        ],
    );
    let corpus = cipher_corpus(a.sentences, seed, alphabets)?;
    write_lines(&a.latin_out, &corpus.latin)?;
    write_lines(&a.cipher_out, &corpus.cipher)?;
    println!("{} sentences written", corpus.latin.len());
    Ok(())
}
