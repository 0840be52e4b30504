use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

/// Exit status for invalid flags, configs or mismatched artifacts.
const EXIT_CONFIG: u8 = 2;
/// Exit status for unreadable or inconsistent input data.
const EXIT_DATA: u8 = 3;
/// Exit status for failures during the run itself.
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "blens", version, about = "Function-name prediction for stripped binaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its embedding bundles.
    Synth(SynthArgs),
    /// Build a word vocabulary from corpus names.
    Vocab(VocabArgs),
    /// Split a corpus into train/val/test by binary or project.
    Split(SplitArgs),
    /// Contrastive-captioning pre-training.
    Pretrain(PretrainArgs),
    /// Masked-LM fine-tuning from a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Select the decoding threshold on a validation corpus.
    Calibrate(CalibrateArgs),
    /// Predict names for a corpus.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Apply the strict-setting filter and score the remainder.
    StrictFilter(StrictFilterArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    projects: usize,
    #[arg(long, default_value_t = 2)]
    binaries: usize,
    #[arg(long, default_value_t = 4)]
    functions: usize,
    /// Seed of the embedding provider's word directions.
    #[arg(long, default_value_t = 7)]
    provider_seed: u64,
    #[arg(long, default_value_t = 64)]
    d_a: usize,
    #[arg(long, default_value_t = 32)]
    d_b: usize,
    #[arg(long, default_value_t = 16)]
    d_p: usize,
    /// Write bundles in the packed binary format instead of JSONL.
    #[arg(long)]
    packed: bool,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = blens::tokenizer::DEFAULT_VOCAB_SIZE)]
    size: usize,
    /// JSON object mapping abbreviations to expansions.
    #[arg(long)]
    abbreviations: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    Binary,
    Project,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum)]
    grouping: GroupingArg,
    #[arg(long)]
    seed: u64,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Corpus JSONL of the functions to use.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding bundles (JSONL or packed).
    #[arg(long)]
    bundles: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    /// JSON run config with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss-curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Name slots `n` when no model config is given.
    #[arg(long, default_value_t = 4)]
    max_words: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    from: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Validation corpus for calibration and model selection.
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 50)]
    grid_points: usize,
    /// Store the selected threshold in the checkpoint.
    #[arg(long)]
    write: bool,
    /// Calibration report JSON; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    CrossBinary,
    CrossProject,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Overrides the checkpoint's calibrated threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Selects the default threshold when neither flag nor checkpoint has one.
    #[arg(long, value_enum, default_value_t = SettingArg::CrossBinary)]
    setting: SettingArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoringFlags {
    /// JSON array of free-function names; defaults to the built-in list.
    #[arg(long)]
    free_list: Option<PathBuf>,
    #[arg(long, default_value_t = blens::metrics::DEFAULT_ROUGE_BETA)]
    beta: f64,
    /// Add the bag-of-words cosine similarity to the report.
    #[arg(long)]
    similarity: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Corpus JSONL with the true names.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    scoring: ScoringFlags,
    /// credit, discard or keep.
    #[arg(long, default_value = "credit")]
    free_mode: String,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct StrictFilterArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// JSON array of excluded words.
    #[arg(long)]
    excluded: PathBuf,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Invalid usage detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<blens::Error>() {
            return match e {
                blens::Error::Config(_) | blens::Error::Checkpoint(_) => EXIT_CONFIG,
                e if e.is_data_error() => EXIT_DATA,
                blens::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_DATA,
                _ => EXIT_RUNTIME,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_DATA;
            }
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Vocab(a) => commands::vocab(a),
        Command::Split(a) => commands::split(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::StrictFilter(a) => commands::strict_filter(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
