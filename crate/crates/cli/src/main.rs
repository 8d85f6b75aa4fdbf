mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::RunConfig;

/// Diffusion-model synthesis and evaluation of mixed-type longitudinal
/// health records.
///
/// Settings come from the JSON file given with `--config`; `--seed` and
/// `--out` override the corresponding fields. Without either, the output
/// root is `$MIXDIFF_OUT` or `./mixdiff-out`.
#[derive(Parser)]
#[command(name = "mixdiff", version)]
struct Cli {
    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Log debug detail.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Render PNG plots from the CSV outputs.
    #[arg(long)]
    plots: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded toy cohort (train and holdout CSVs plus schema).
    Toygen(Common),
    /// Train a denoiser on the real CSV.
    Train(Common),
    /// Sample synthetic patients from a checkpoint.
    Sample(Common),
    /// Fidelity and structure metrics for a real/synthetic pair.
    Evaluate(Common),
    /// Disclosure risk, nearest-record distance and demographic coverage.
    Privacy(Common),
    /// Offline-RL policies on real and synthetic data and their divergence.
    Utility(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Toygen(c) => ("toygen", c),
            Command::Train(c) => ("train", c),
            Command::Sample(c) => ("sample", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Privacy(c) => ("privacy", c),
            Command::Utility(c) => ("utility", c),
        }
    }
}

fn run(name: &str, common: &Common) -> anyhow::Result<()> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(common.seed, common.out.clone());
    let plots = common.plots;
    match name {
        "toygen" => commands::toygen(&cfg, plots),
        "train" => commands::train_cmd(&cfg, plots),
        "sample" => commands::sample_cmd(&cfg, plots),
        "evaluate" => commands::evaluate_cmd(&cfg, plots),
        "privacy" => commands::privacy_cmd(&cfg, plots),
        "utility" => commands::utility_cmd(&cfg, plots),
        _ => unreachable!("clap restricts subcommands"),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<mixdiff::Error>() {
        return e.kind();
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return "config";
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "usage"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        "error"
    } else if cli.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (name, common) = cli.command.parts();
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let body = json!({
                "error": {
                    "command": name,
                    "kind": error_kind(&err),
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
