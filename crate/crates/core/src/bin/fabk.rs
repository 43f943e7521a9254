use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use fabk::config::{ExperimentConfig, SweepConfig};
use fabk::controller::SearchInterval;
use fabk::harness::{self, RunStatus};
use fabk::regret::{self, RegretController, RegretSpec, SyntheticCostFamily};

#[derive(Parser)]
#[command(name = "fabk", version, about = "Top-k sparsified federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a grid of experiments.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Override the seed of every grid point.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Regret of sign descent on the synthetic cost family.
    Regret {
        #[arg(long, value_enum, default_value_t = Algo::Sign)]
        controller: Algo,
        #[arg(long, default_value_t = 0.0)]
        flip_prob: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Sign,
    Extended,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::from_path(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = harness::run_experiment(&cfg, &out)?;
            let s = &outcome.summary;
            println!(
                "{}: {} rounds, sim_time {:.3}, loss {:.5}, acc {:.4}",
                s.config_id, s.rounds, s.sim_time, s.final_loss, s.final_acc
            );
            if let RunStatus::Diverged { round, reason } = outcome.status {
                eprintln!("diverged at round {round}: {reason}");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sweep { config, seed, out } => {
            let mut sweep = SweepConfig::from_path(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                sweep.base.seed = s;
                sweep.grid.seed = None;
            }
            let result = harness::sweep_from(&sweep, &out)?;
            println!("{} runs written to {}", result.rows.len(), out.display());
            if !result.failures.is_empty() {
                for (id, e) in &result.failures {
                    eprintln!("{id}: {e}");
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Regret {
            controller,
            flip_prob,
            trials,
            horizons,
            seed,
            out,
        } => {
            if horizons.is_empty() {
                bail!("need at least one horizon");
            }
            let family = SyntheticCostFamily::default_family(seed);
            let spec = RegretSpec {
                controller: match controller {
                    Algo::Sign => RegretController::SignDescent,
                    Algo::Extended => RegretController::Extended {
                        alpha: 1.5,
                        update_window: 20,
                    },
                },
                interval: SearchInterval::new(1.0, family.dim() as f64)?,
                flip_prob,
                trials,
                initial_k: None,
                seed,
            };
            let stats = regret::run_regret_experiment(&family, &spec, &horizons)?;
            std::fs::create_dir_all(&out)?;
            regret::write_regret_csv(File::create(out.join("regret.csv"))?, &stats)?;
            for s in &stats {
                println!(
                    "M={:>6}  mean R={:.4e}  max R={:.4e}  bound={:.4e}  violations={}",
                    s.horizon, s.mean, s.max, s.bound, s.violations
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
