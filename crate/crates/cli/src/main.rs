mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "msmmt", version, about = "Micro-expression recognition with a multi-scale multi-modal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic micro-motion dataset and its manifest.
    GenSynth(Common),
    /// Align, magnify and augment the clips of a manifest.
    Preprocess(WithManifest),
    /// Compute cached dynamic and flow-OS images.
    Features(WithManifest),
    /// Train on every subject but one and evaluate on the held-out one.
    Train(WithManifest),
    /// Leave-one-subject-out evaluation.
    Loso(LosoArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; overrides `eval.workers`.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct WithManifest {
    #[command(flatten)]
    pub common: Common,
    /// Dataset manifest; defaults to `<out>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Test subject.
    #[arg(long)]
    pub fold: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct LosoArgs {
    #[command(flatten)]
    pub inner: WithManifest,
    /// Sweep the loss weight over the configured grid instead of one run.
    #[arg(long)]
    pub alpha_sweep: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MSMMT_LOG", "info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Features(a) => commands::features(&a),
        Command::Train(a) => commands::train(&a),
        Command::Loso(a) => commands::loso(&a.inner, a.alpha_sweep),
    };
    match result {
        Ok(code) => code.into(),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code.into()
        }
    }
}
