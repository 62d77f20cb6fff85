//! `sicl`: corpus generation, two-stage training, in-context fine-tuning,
//! decoding in four modes, cross-attention benchmarking, and built-in
//! verification suites, all behind one binary.

mod commands;
mod verify;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sicl_core::bench::TrackingAlloc;
use sicl_core::error::SiclError;

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc::new();

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "sicl", version, about = "In-context speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus.
    Generate(GenerateArgs),
    /// Train the utterance and document stages.
    Train(TrainArgs),
    /// In-context fine-tune a trained checkpoint.
    Icft(IcftArgs),
    /// Decode a corpus split and write hypotheses plus metrics.
    Decode(DecodeArgs),
    /// Benchmark block vs. full-document cross-attention.
    Bench(BenchArgs),
    /// Run built-in verification suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct GenerateArgs {
    /// Corpus output directory.
    #[arg(long)]
    out: PathBuf,
    /// Full run configuration file; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utts_per_speaker: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    /// Single-utterance documents only.
    Utterance,
    /// Multi-utterance documents only (expects --init).
    Document,
    /// Both stages in order.
    Both,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, value_enum, default_value = "both")]
    stage: Stage,
    /// Checkpoint to warm-start from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IcftArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the fine-tuning epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Each utterance decoded independently.
    Utterance,
    /// Consecutive same-speaker documents with cache carry-over.
    Longform,
    /// Speaker adaptation: same-speaker exemplars as context.
    Adapt,
    /// Contextual biasing: entity-bearing exemplars as context.
    Bias,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Split to decode; defaults to the mode's natural split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    context_size: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    lambda_dec: Option<f64>,
    /// Utterances per long-form document.
    #[arg(long)]
    doc_utts: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6")]
    n_utts: Vec<usize>,
    /// Encoder frames per utterance seen by cross-attention.
    #[arg(long, default_value_t = 256)]
    frames: usize,
    /// Characters per utterance transcription.
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Grad,
    Ctc,
    Equiv,
    Roundtrip,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            writeln!(buf, "{} {} {}", buf.timestamp(), record.level(), record.args())
        })
        .init();
}

fn exit_code_for(err: &SiclError) -> u8 {
    match err {
        SiclError::Io(_) | SiclError::Format(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    let outcome = match cli.command {
        Command::Generate(args) => commands::generate(args).map(|_| 0),
        Command::Train(args) => commands::train(args).map(|_| 0),
        Command::Icft(args) => commands::icft(args).map(|_| 0),
        Command::Decode(args) => commands::decode(args).map(|_| 0),
        Command::Bench(args) => commands::bench(args).map(|_| 0),
        Command::Verify(args) => verify::run(args.suite).map(|ok| if ok { 0 } else { EXIT_VERIFY }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
