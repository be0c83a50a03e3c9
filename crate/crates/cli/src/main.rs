mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tignn_core::model::ModelKind;

use crate::commands::CliError;
use crate::config::{GeneratorKind, RunConfig, SplitKind};

#[derive(Parser, Debug)]
#[command(name = "tignn", version, about = "Nodal thermodynamics-informed graph networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Each overrides the matching config entry.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (relative paths go under $TIGNN_OUTPUT_ROOT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a toy system and write a dataset container.
    Generate {
        #[arg(long, value_enum)]
        generator: Option<GeneratorKind>,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoints and an NDJSON metrics log.
    Train {
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Roll out a split and write per-variable metrics.
    Eval {
        #[arg(long, value_enum)]
        split: Option<SplitKind>,
        /// Replay ground-truth rates instead of the network.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Roll out one initial condition; writes the trajectory and diagnostics.
    Rollout {
        #[arg(long)]
        trajectory: Option<usize>,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Nodal versus assembled operator storage.
    ReportMemory {
        #[arg(long)]
        n_v: Option<usize>,
        #[arg(long)]
        n_e: Option<usize>,
        #[arg(long)]
        n_dof: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: tignn_core::Error| e.to_string())
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(CliError::validation)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = &common.out {
        cfg.output = Some(p.clone());
    }
    if let Some(p) = &common.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            generator,
            trajectories,
            steps,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(g) = generator {
                cfg.generator = g;
            }
            if let Some(n) = trajectories {
                cfg.chain.n_trajectories = n;
                cfg.lattice.n_trajectories = n;
            }
            if let Some(n) = steps {
                cfg.chain.n_steps = n;
                cfg.lattice.n_steps = n;
            }
            commands::generate(&cfg)
        }
        Command::Train { model, epochs, common } => {
            let mut cfg = base_config(&common)?;
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(n) = epochs {
                cfg.train.n_epochs = n;
            }
            commands::train(&cfg)
        }
        Command::Eval { split, oracle, common } => {
            let mut cfg = base_config(&common)?;
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            cfg.eval.oracle |= oracle;
            commands::eval(&cfg)
        }
        Command::Rollout {
            trajectory,
            start,
            steps,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(k) = trajectory {
                cfg.rollout.trajectory = k;
            }
            if let Some(s) = start {
                cfg.rollout.start = s;
            }
            if steps.is_some() {
                cfg.rollout.steps = steps;
            }
            commands::rollout(&cfg)
        }
        Command::ReportMemory { n_v, n_e, n_dof, common } => {
            let cfg = base_config(&common)?;
            commands::report_memory(&cfg, n_v, n_e, n_dof)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
