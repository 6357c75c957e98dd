use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use coboost::orchestrator::{report, run_all_seeds, sweep, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "coboost", version, about = "One-shot federated learning with co-boosted distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method for the configured seeds (or a single seed).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// fedavg, fedens, plain_distill or co_boosting
        #[arg(long)]
        method: Option<String>,
        /// Dotted config overrides, e.g. `partition.alpha=0.05`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every method and variant listed under `[sweep]` and print the table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild the accuracy table from a finished output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(cfg.with_overrides(overrides)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            method,
            overrides,
        } => {
            let mut cfg = load(&config, &overrides)?;
            if let Some(m) = method {
                cfg.method = m.parse::<Method>()?;
            }
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            cfg.validate()?;
            for r in run_all_seeds(&cfg)? {
                println!(
                    "{}\taccuracy {:.2}%\tensemble {:.2}%\t{:.1}s\t{}",
                    r.summary.run_id,
                    100.0 * r.summary.final_accuracy,
                    100.0 * r.summary.final_ensemble_accuracy,
                    r.summary.wall_clock_secs,
                    r.run_dir.display()
                );
            }
        }
        Command::Sweep { config } => {
            let cfg = load(&config, &[])?;
            let outcome = sweep(&cfg)?;
            print!("{}", outcome.table);
            for (variant, method, seed, err) in &outcome.failures {
                eprintln!("failed: {variant} {method} seed {seed}: {err}");
            }
        }
        Command::Report { dir } => {
            let table = report(&dir)?;
            if table.lines().count() <= 2 {
                bail!("no run summaries under {}", dir.display());
            }
            print!("{table}");
        }
    }
    Ok(())
}
