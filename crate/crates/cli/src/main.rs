//! `nautilus` command-line entry point.

mod commands;
mod rundir;
mod toyspec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "nautilus",
    version,
    about = "Multi-speaker TTS/VC training and voice cloning"
)]
struct Cli {
    /// Seed for every random stream (falls back to NAUTILUS_SEED, then the config).
    #[arg(long, global = true, env = "NAUTILUS_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus or validate an existing corpus directory.
    PrepareData(PrepareArgs),
    /// Initial multi-speaker training of the text-speech model and vocoder.
    Train(TrainArgs),
    /// Step 1: speaker-bias removal and fine-tuning on a target speaker.
    Adapt(AdaptArgs),
    /// Step 2: joint fine-tuning of speech decoder and vocoder.
    Weld(WeldArgs),
    /// Text-to-speech with a cloned model.
    Tts(TtsArgs),
    /// Voice conversion with a cloned model.
    Vc(VcArgs),
    /// Curves, latent dumps, phoneme error rate and the ablation matrix.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["toy_spec", "import"])))]
pub struct PrepareArgs {
    /// Toy corpus description (`key = value` lines), or `default`.
    #[arg(long)]
    pub toy_spec: Option<String>,
    /// Existing corpus directory to validate.
    #[arg(long)]
    pub import: Option<PathBuf>,
    /// Where to write the corpus (required with --toy-spec).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Preset used when no earlier run is given.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Configuration file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus trained on first, before the main corpus.
    #[arg(long)]
    pub warmup_corpus: Option<PathBuf>,
    /// Comma-separated training speakers (default: all).
    #[arg(long, value_delimiter = ',')]
    pub speakers: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Unsup,
    Sup,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EpochPreset {
    A,
    B,
}

#[derive(Args)]
pub struct TargetArgs {
    /// Run directory of the previous stage.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Use only the first N target utterances.
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct AdaptArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long, value_enum)]
    pub epochs_preset: Option<EpochPreset>,
    #[command(flatten)]
    pub target: TargetArgs,
}

#[derive(Args)]
pub struct WeldArgs {
    #[command(flatten)]
    pub target: TargetArgs,
}

#[derive(Args)]
pub struct TtsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Label file with `<symbol> <start> <end>` lines.
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VcArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Source mel file.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("what").required(true).args(["curves", "dump_lle", "per", "ablation"])))]
pub struct DiagnoseArgs {
    /// Tabulate the loss curves of a run directory.
    #[arg(long)]
    pub curves: bool,
    /// Dump text- and speech-encoder latents of one utterance.
    #[arg(long)]
    pub dump_lle: bool,
    /// Frame-level phoneme error rate on a corpus.
    #[arg(long)]
    pub per: bool,
    /// Train and clone the five ablation setups.
    #[arg(long)]
    pub ablation: bool,
    /// Run directory (required except for --ablation).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub utterance: Option<String>,
    /// Label stored in latent dumps.
    #[arg(long, default_value = "unsupervised")]
    pub variant: String,
    #[arg(long)]
    pub target: Option<String>,
    /// Target utterances used for adaptation in the ablation.
    #[arg(long, default_value_t = 20)]
    pub adapt_utterances: usize,
    #[arg(long, value_delimiter = ',')]
    pub speakers: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::PrepareData(a) => commands::prepare_data(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Adapt(a) => commands::adapt(a, cli.seed),
        Command::Weld(a) => commands::weld(a, cli.seed),
        Command::Tts(a) => commands::tts(a, cli.seed),
        Command::Vc(a) => commands::vc(a, cli.seed),
        Command::Diagnose(a) => commands::diagnose(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
