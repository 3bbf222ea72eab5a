//! `shardsim` command-line front end.
//!
//! Exit status: 0 on success, 1 when a run finished but failed (violations,
//! OOM, reconciliation mismatch, failed criteria), 2 on config or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shardsim::cli::{cmd_analyze, cmd_simulate, cmd_sweep, cmd_validate, Outcome, RunConfig, SweepAxis};
use shardsim::simengine::Exec;

#[derive(Parser)]
#[command(name = "shardsim", version, about = "Simulate and model sharded data-parallel training strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical memory, communication and feasibility tables.
    Analyze(Common),
    /// Simulate, verify and reconcile each strategy.
    Simulate(Common),
    /// Sweep one axis and write a throughput table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// internode_bandwidth, model_preset, trainable_fraction, tau or nodes.
        #[arg(long)]
        axis: Option<SweepAxis>,
    },
    /// Run the built-in acceptance matrix.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Criteria to run (1-8); all when omitted.
        #[arg(long = "criterion", value_name = "N")]
        criteria: Vec<u8>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `run.output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these strategies (repeatable).
    #[arg(long = "strategy", value_name = "NAME")]
    strategies: Vec<String>,
    /// Run simulations one at a time instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

fn run(cli: Cli) -> shardsim::Result<Outcome> {
    let common = match &cli.command {
        Command::Analyze(c) | Command::Simulate(c) => c,
        Command::Sweep { common, .. } | Command::Validate { common, .. } => common,
    };
    let (cfg, hash) = RunConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone());
    match &cli.command {
        Command::Analyze(c) => cmd_analyze(&cfg, &hash, &out, &c.strategies),
        Command::Simulate(c) => cmd_simulate(&cfg, &hash, &out, &c.strategies, c.exec()),
        Command::Sweep { common, axis } => cmd_sweep(&cfg, &hash, &out, &common.strategies, *axis, common.exec()),
        Command::Validate { common, criteria } => cmd_validate(&cfg, &hash, &out, criteria, common.exec()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("wrote {} files to {}", outcome.files.len(), outcome.out_dir.display());
            if outcome.failed {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
