mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refmel::Error;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nRMKD1 1\nMEL1 1\nCORP 1"
);

/// Low-resource acoustic model fine-tuning with a frozen reference model.
#[derive(Debug, Parser)]
#[command(name = "refmel", version, long_version = LONG_VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-speaker corpus.
    GenData(GenDataArgs),
    /// Train the reference model on the source speakers.
    Pretrain(PretrainArgs),
    /// Fine-tune a copy of a reference model on target-speaker data.
    Finetune(FinetuneArgs),
    /// Synthesize a mel-spectrogram and waveform from phoneme ids.
    Synthesize(SynthesizeArgs),
    /// Run the omega x size x seed experiment grid.
    Grid(GridArgs),
    /// Score a checkpoint on held-out data, or a mel file against the oracle.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub(crate) struct GenDataArgs {
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Total speakers; the last one is the target.
    #[arg(long)]
    speakers: Option<usize>,
    /// Utterances per speaker.
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    /// key=value file with seed, speakers, utterances, vocab, min_len, max_len, test_size.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Optimization flags shared by pretrain and finetune; they override the config file.
#[derive(Debug, Args)]
pub(crate) struct TrainFlags {
    /// key=value file with training keys and `model.<field>` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Training log destination; defaults to standard output.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct PretrainArgs {
    /// Corpus file.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
pub(crate) struct FinetuneArgs {
    /// Reference checkpoint (stage=reference).
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weight of the reference loss, in [0, 10].
    #[arg(long)]
    omega: Option<f64>,
    /// Number of target training utterances.
    #[arg(long)]
    size: usize,
    /// Recompute pseudo labels every step instead of caching them.
    #[arg(long)]
    no_cache: bool,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
pub(crate) struct SynthesizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated phoneme ids.
    #[arg(long)]
    phonemes: String,
    /// Speaker row; defaults to the checkpoint's target speaker, or 0.
    #[arg(long)]
    speaker: Option<usize>,
    #[arg(long)]
    out_mel: PathBuf,
    #[arg(long)]
    out_wav: Option<PathBuf>,
    /// Optional PGM rendering of the mel-spectrogram.
    #[arg(long)]
    out_pgm: Option<PathBuf>,
    #[arg(long, default_value_t = refmel::dsp::DEFAULT_ITERATIONS)]
    iterations: usize,
}

#[derive(Debug, Args)]
pub(crate) struct GridArgs {
    /// Grid spec file (key=value lines).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Worker threads; overrides the spec.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
pub(crate) struct EvaluateArgs {
    #[arg(long, conflicts_with = "mel")]
    ckpt: Option<PathBuf>,
    /// Corpus whose target test split is scored.
    #[arg(long, requires = "ckpt")]
    data: Option<PathBuf>,
    /// MEL1 file to compare with the oracle rendering of --phonemes/--speaker.
    #[arg(long, requires_all = ["phonemes", "speaker"])]
    mel: Option<PathBuf>,
    #[arg(long)]
    phonemes: Option<String>,
    #[arg(long)]
    speaker: Option<usize>,
    /// Split to score with --ckpt.
    #[arg(long, default_value = "test", value_parser = ["test", "train"])]
    split: String,
    /// Metrics output (key=value lines); standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub(crate) struct GradcheckArgs {
    /// Number of seeds per check.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Relative error threshold for the individual ops.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Relative error threshold for the full model under the combined loss.
    #[arg(long, default_value_t = 1e-4)]
    composite_tolerance: f64,
    /// Coordinates checked per parameter array in the full-model check.
    #[arg(long, default_value_t = 8)]
    sample: usize,
    /// Weight of the reference loss in the full-model check.
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
}

/// Process exit status for an error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Format { .. } => 3,
        Error::Divergence { .. } | Error::RunawayDuration { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Grid(a) => commands::grid(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
