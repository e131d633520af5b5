//! `driftscape` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftscape::corruptions::CorruptionKind;
use driftscape::tasks::TaskKind;
use driftscape::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "driftscape", version, about = "Client drift and catastrophic forgetting experiments")]
struct Cli {
    /// Print the full default configuration as TOML and exit.
    #[arg(long, value_name = "TASK", num_args = 0..=1, default_missing_value = "classification")]
    dump_defaults: Option<TaskKind>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Client-drift sweep over the shifted-client ratio.
    Cd(RunArgs),
    /// Forgetting sweep over the severity levels.
    Cf(RunArgs),
    /// Full drift x forgetting landscape.
    Joint(RunArgs),
    /// Per-kind drift and forgetting at full strength.
    Ablation(RunArgs),
    /// Calibrate a transform to a target drop and check forgetting feasibility.
    Calibrate(RunArgs),
    /// Correlate saved drift and forgetting curves and locate the landscape bump.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Clone, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "DRIFT_WORKERS")]
    pub workers: Option<usize>,
    /// Clean rehearsal share of every client shard.
    #[arg(long)]
    pub rehearsal: Option<f64>,
    /// Comma-separated corruption kinds.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<CorruptionKind>>,
}

#[derive(Args, Clone)]
pub struct AnalyzeArgs {
    /// Results CSV of a `cd` run.
    #[arg(long)]
    pub cd: PathBuf,
    /// Results CSV of a `cf` run.
    #[arg(long)]
    pub cf: PathBuf,
    /// Landscape JSON of a `joint` run.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> driftscape::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::defaults(TaskKind::Classification),
        };
        if let Some(seeds) = &self.seeds {
            cfg.run.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        if let Some(f) = self.rehearsal {
            cfg.federation.rehearsal_fraction = f;
        }
        if let Some(kinds) = &self.kinds {
            cfg.federation.shift.kinds = kinds.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    if err.is_calibration_infeasible() {
        4
    } else if err.is_config() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(kind) = cli.dump_defaults {
        print!("{}", RunConfig::defaults(kind).to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Analyze(args) => commands::analyze(&args),
        Command::Cd(args) => args.resolve().and_then(|c| commands::cd(&c)),
        Command::Cf(args) => args.resolve().and_then(|c| commands::cf(&c)),
        Command::Joint(args) => args.resolve().and_then(|c| commands::joint(&c)),
        Command::Ablation(args) => args.resolve().and_then(|c| commands::ablation(&c, args.kinds.is_some())),
        Command::Calibrate(args) => args.resolve().and_then(|c| commands::calibrate(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let Error::GridAborted { completed, .. } = &err {
                eprintln!("completed cells: {completed:?}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
