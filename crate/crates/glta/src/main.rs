use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glta::config::RunConfig;
use glta::pipeline::{
    cmd_ablate, cmd_align_items, cmd_align_users, cmd_evaluate, cmd_gen_profiles, cmd_pretrain,
    RunOptions,
};
use glta::Error;

/// Graph-language token alignment for recommendation.
///
/// Any config key can be overridden with `--section.key=value`.
#[derive(Parser)]
#[command(name = "glta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file (sectioned key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing checkpoints.
    #[arg(long, global = true)]
    force: bool,
    /// Shorthand for --ablation.no_item_align=true.
    #[arg(long, global = true)]
    no_item_align: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: graph embeddings and the frozen backbone.
    Pretrain,
    /// Stage 2: item-text alignment.
    AlignItems(TrainArgs),
    /// Generate or reuse profile and prediction texts.
    GenProfiles,
    /// Stage 3: user-item alignment.
    AlignUsers(TrainArgs),
    /// Metric report of the stage-3 checkpoint.
    Evaluate {
        /// Every inference mode plus the dot-product baseline.
        #[arg(long)]
        all_modes: bool,
    },
    /// Every ablation variant under every inference mode.
    Ablate,
    /// Print the effective config.
    Config,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Continue an unfinished checkpoint of this stage.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in total.
    #[arg(long)]
    stop_after: Option<usize>,
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|b| b.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    })
}

fn run(cli: Cli, overrides: &[String]) -> glta::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    if cli.no_item_align {
        cfg.ablation.no_item_align = true;
    }
    cfg.validate()?;
    let opts = |t: Option<&TrainArgs>| RunOptions {
        force: cli.force,
        resume: t.is_some_and(|t| t.resume),
        stop_after: t.and_then(|t| t.stop_after),
    };
    match &cli.command {
        Command::Pretrain => {
            cmd_pretrain(&cfg, &opts(None))?;
        }
        Command::AlignItems(t) => {
            cmd_align_items(&cfg, &opts(Some(t)))?;
        }
        Command::GenProfiles => {
            let assets = cmd_gen_profiles(&cfg)?;
            println!("{} users, cache {}", assets.len(), cfg.texts_path().display());
        }
        Command::AlignUsers(t) => {
            cmd_align_users(&cfg, &opts(Some(t)))?;
        }
        Command::Evaluate { all_modes } => {
            let report = cmd_evaluate(&cfg, *all_modes)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate => {
            let table = cmd_ablate(&cfg, &opts(None))?;
            print!("{}", table.render());
        }
        Command::Config => print!("{}", cfg.snapshot()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (overrides, args) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Core(glta_core::Error::Invariant(_)) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
