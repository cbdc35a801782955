//! `romalign`: romanization-based alignment from the command line.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use romalign::objectives::Objectives;
use romalign::pipeline::Profile;

#[derive(Debug, Parser)]
#[command(name = "romalign", version, about = "Cross-script alignment through romanization")]
struct Cli {
    /// Seed for every random choice; echoed with the resolved config.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Romanize a text file line by line.
    Romanize(RomanizeArgs),
    /// Report the dominant script of a text or of each line of a file.
    DetectScript(DetectArgs),
    /// Sample a corpus: max(fraction of its lines, floor), order kept.
    Sample(SampleArgs),
    /// Train a BPE vocabulary over one or more corpora.
    TrainVocab(TrainVocabArgs),
    /// Encode each line next to its romanization as token ids.
    BuildPairs(BuildPairsArgs),
    /// Continue training an encoder with the alignment objectives.
    Train(TrainArgs),
    /// Pick the checkpoint with the best dev retrieval accuracy.
    SelectCheckpoint(SelectArgs),
    /// Top-k sentence retrieval between two line-aligned files.
    EvalRetrieval(RetrievalArgs),
    /// Fine-tune a classifier and report macro-F1 on test sets.
    EvalClassify(ClassifyArgs),
    /// Fine-tune a tagger and report macro-F1 on test sets.
    EvalTag(TagArgs),
    /// Count the distinct vocabulary tokens each corpus uses.
    VocabCoverage(CoverageArgs),
    /// Evaluate the baseline and the four objective combinations.
    Ablate(AblateArgs),
    /// Check backpropagated gradients of the full loss by finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic Latin corpus and its Greek-letter cipher.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct RomanizeArgs {
    /// Bundled table name (grek, hebr, arab, cipher) or a rule file.
    #[arg(long)]
    rules: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct DetectArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    text: Option<String>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    /// Minimum number of lines kept.
    #[arg(long, default_value_t = 10_000)]
    floor: usize,
}

#[derive(Debug, Args)]
struct TrainVocabArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct BuildPairsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    rules: String,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// TSV output: original ids, a tab, romanized ids.
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ObjectiveArg {
    Mlm,
    #[value(name = "mlm+seq")]
    MlmSeq,
    #[value(name = "mlm+tlm")]
    MlmTlm,
    Full,
}

impl From<ObjectiveArg> for Objectives {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Mlm => Objectives::MLM,
            ObjectiveArg::MlmSeq => Objectives::MLM_SEQ,
            ObjectiveArg::MlmTlm => Objectives::MLM_TLM,
            ObjectiveArg::Full => Objectives::FULL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Original-script training corpus, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    rules: String,
    #[arg(long)]
    vocab: PathBuf,
    /// Run directory for checkpoints, the loss log and the saved config.
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Full)]
    objectives: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// `key = value` overrides applied on top of the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model shape file; defaults to the desk model sized to the vocabulary.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Start from this checkpoint instead of random weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Print the loss every this many updates.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Run directory; every `step-*` subdirectory is a candidate.
    #[arg(long, required_unless_present = "checkpoint")]
    run: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Original-script dev sentences.
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    rules: String,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
}

#[derive(Debug, Args)]
struct RetrievalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Query sentences.
    #[arg(long)]
    source: PathBuf,
    /// Candidates; line i is the gold match of query i.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Test sets, each named after its file stem.
    #[arg(long, required = true, num_args = 1..)]
    test: Vec<PathBuf>,
    /// Fine-tuning seeds, comma separated; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Threads for the per-seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Writes `test,seed,macro_f1` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[command(flatten)]
    common: FinetuneArgs,
    /// taxi1500 or sib200.
    #[arg(long, default_value = "taxi1500")]
    preset: String,
}

#[derive(Debug, Args)]
struct TagArgs {
    #[command(flatten)]
    common: FinetuneArgs,
    /// ner or pos.
    #[arg(long, default_value = "pos")]
    preset: String,
    /// Tags, comma separated; defaults to those seen in training.
    #[arg(long, value_delimiter = ',')]
    tagset: Vec<String>,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Checkpoint before alignment training.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    mlm: PathBuf,
    #[arg(long)]
    mlm_seq: PathBuf,
    #[arg(long)]
    mlm_tlm: PathBuf,
    #[arg(long)]
    full: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Retrieval column as `SOURCE,TARGET` files, named after their stems.
    #[arg(long)]
    retrieval: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, requires_all = ["classify_val", "classify_test"])]
    classify_train: Option<PathBuf>,
    #[arg(long)]
    classify_val: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    classify_test: Vec<PathBuf>,
    #[arg(long, default_value = "taxi1500")]
    classify_preset: String,
    #[arg(long, requires_all = ["tag_val", "tag_test"])]
    tag_train: Option<PathBuf>,
    #[arg(long)]
    tag_val: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    tag_test: Vec<PathBuf>,
    #[arg(long, default_value = "pos")]
    tag_preset: String,
    /// Fine-tuning seeds, comma separated; defaults to --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Threads across report rows.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Writes the scores as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Pairs in the micro-batch.
    #[arg(long, default_value_t = 2)]
    pairs: usize,
    /// Coordinates to check; 0 checks every parameter.
    #[arg(long, default_value_t = 0)]
    coords: usize,
    /// Largest relative error accepted.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlphabetArg {
    Lower,
    Upper,
    Both,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    sentences: usize,
    #[arg(long, value_enum, default_value_t = AlphabetArg::Lower)]
    alphabet: AlphabetArg,
    #[arg(long)]
    latin_out: PathBuf,
    #[arg(long)]
    cipher_out: PathBuf,
}

/// Why a verb failed; each kind has its own exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(romalign::Error),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
            Failure::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<romalign::Error> for Failure {
    fn from(e: romalign::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
