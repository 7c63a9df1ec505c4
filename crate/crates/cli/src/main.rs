use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sftlab::harness::{self, AcceptOptions, ExperimentConfig, Overrides};
use sftlab::train::Objective;
use sftlab::Exec;

#[derive(Parser)]
#[command(name = "sftlab", version, about = "Token-MDP fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` and `[train] seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// mle, f_sft, dpo, multi_objective or interleaved.
    #[arg(long, value_name = "NAME")]
    objective: Option<String>,
    #[arg(long, value_name = "NAME")]
    divergence: Option<String>,
    #[arg(long, value_name = "FLOAT")]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the MDP, solve the expert and write datasets.
    Gen(Common),
    /// Solve the soft-optimal expert and check the solution.
    Solve(Common),
    /// Train on previously generated datasets.
    Train(Common),
    /// Probe the checkpoints of a training run.
    Probe(Common),
    /// Run the acceptance suite; exits non-zero on any failure.
    Accept {
        #[command(flatten)]
        common: Common,
        /// Perturb the solver output so the fixed-point criterion must fail.
        #[arg(long)]
        inject_fault: bool,
        /// Only run these criteria (comma separated ids).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[arg(long)]
        sequential: bool,
    },
    /// Run gen/train/probe over the `[sweep]` grid.
    Sweep(Common),
    /// Summarize a run directory.
    Report(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_ref().context("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    let objective = match &common.objective {
        Some(o) => Some(o.parse::<Objective>()?),
        None => None,
    };
    Overrides {
        out: common.out.clone(),
        seed: common.seed,
        objective,
        divergence: common.divergence.clone(),
        lr: common.lr,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(c) => {
            let dir = harness::cmd_gen(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
        Command::Solve(c) => {
            let dir = harness::cmd_solve(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
        Command::Train(c) => {
            let dir = harness::cmd_train(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
        Command::Probe(c) => {
            let dir = harness::cmd_probe(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
        Command::Accept {
            common,
            inject_fault,
            only,
            sequential,
        } => {
            let opts = AcceptOptions {
                exec: if sequential { Exec::Sequential } else { Exec::default() },
                inject_q_perturbation: inject_fault,
                only,
            };
            let report = harness::cmd_accept(&opts, common.out.as_deref())?;
            println!("{report}");
            return Ok(report.passed());
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let rows = harness::cmd_sweep(&cfg, Exec::default())?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} runs, {failed} failed; summary in {}", rows.len(), cfg.output.dir.join("sweep").display());
            return Ok(failed == 0);
        }
        Command::Report(c) => {
            let out = match (&c.out, &c.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => load(&c)?.output.dir,
                (None, None) => bail!("report needs --out or --config"),
            };
            print!("{}", harness::cmd_report(&out)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
