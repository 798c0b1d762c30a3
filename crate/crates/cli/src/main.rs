//! `vlnhijack <command> --config <path> [--out <dir>] [--workers N] [--seed S]`
//!
//! Keys in the config file can be overridden with `VHL_` environment
//! variables: `VHL_SEED`, `VHL_ATTACK_EPSILON`, `VHL_AGENT_EPOCHS`, ...

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use vln_hijack::pipeline::{self, Command, RunConfig};
use vln_hijack::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    GenWorld,
    TrainAgent,
    BuildAttacks,
    Attack,
    Eval,
    Ablate,
    Report,
}

impl From<Stage> for Command {
    fn from(s: Stage) -> Self {
        match s {
            Stage::GenWorld => Command::GenWorld,
            Stage::TrainAgent => Command::TrainAgent,
            Stage::BuildAttacks => Command::BuildAttacks,
            Stage::Attack => Command::Attack,
            Stage::Eval => Command::Eval,
            Stage::Ablate => Command::Ablate,
            Stage::Report => Command::Report,
        }
    }
}

/// Texture attacks on navigation agents in synthetic worlds.
#[derive(Debug, Parser)]
#[command(name = "vlnhijack", version)]
struct Cli {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    command: Stage,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `run.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core (overrides `run.workers`).
    #[arg(long)]
    workers: Option<usize>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

fn load(cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(&cli.config)
        .with_context(|| format!("reading {}", cli.config.display()))?;
    let mut cfg = pipeline::parse_config(&text).with_context(|| format!("in {}", cli.config.display()))?;
    if let Some(out) = &cli.out {
        cfg.run.out_dir = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(_) | Error::HashMismatch { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let command = Command::from(cli.command);
    let result = load(&cli).and_then(|cfg| {
        pipeline::run(command, &cfg)?;
        log::info!("{command} finished; artifacts in {}", cfg.run.out_dir.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
