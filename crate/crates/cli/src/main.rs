use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use simcal_cli::pipeline::{ACTIVATIONS_DIR, EVENTS_FILE, PAIRS_FILE, TOKENS_FILE, VOCAB_FILE};
use simcal_cli::{cmd_all, cmd_embed, cmd_grid, cmd_pairs, cmd_tokenize, cmd_vocab, RunConfig};

#[derive(Parser)]
#[command(
    version,
    about = "Calibrate music-window embeddings and score them against composer labels"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "SIMCAL_CONFIG")]
    config: Option<PathBuf>,
    /// Override the global seed; every module seed is re-derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the corpus and write single-event token ids.
    Tokenize {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Build the aggregated vocabulary and re-tokenize the corpus.
    Vocab {
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Run the model over every window and dump activations.
    Embed {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Sample labelled window pairs.
    Pairs {
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Score every calibration setting and write the report.
    Grid {
        #[arg(long)]
        activations: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Run every stage and write the artifact manifest.
    All,
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .context("no run config: pass --config or set SIMCAL_CONFIG")?;
    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.paths.out_dir = std::env::current_dir()?.join(out);
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    let needs_manifest = matches!(
        cli.command,
        Command::Tokenize { manifest: None } | Command::All
    );
    cfg.validate(needs_manifest)
        .with_context(|| format!("invalid config {}", config_path.display()))?;

    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let or = |p: Option<PathBuf>, default: &str| p.unwrap_or_else(|| out.join(default));
    match cli.command {
        Command::Tokenize { manifest } => {
            cmd_tokenize(&cfg, &manifest.unwrap_or_else(|| cfg.manifest_path()), &out)?;
        }
        Command::Vocab { events } => {
            cmd_vocab(&cfg, &or(events, EVENTS_FILE), &out)?;
        }
        Command::Embed { tokens, vocab } => {
            cmd_embed(&cfg, &or(tokens, TOKENS_FILE), &or(vocab, VOCAB_FILE), &out)?;
        }
        Command::Pairs { tokens } => {
            cmd_pairs(&cfg, &or(tokens, TOKENS_FILE), &out)?;
        }
        Command::Grid { activations, pairs } => {
            cmd_grid(
                &cfg,
                &or(activations, ACTIVATIONS_DIR),
                &or(pairs, PAIRS_FILE),
                &out,
            )?;
        }
        Command::All => {
            let manifest = cmd_all(&cfg)?;
            log::info!(
                "{} artifacts written to {}",
                manifest.artifacts.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
