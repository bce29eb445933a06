//! `hamassim <generate|train|predict|filter|evaluate> --config <path>`

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hamassim::pipeline::{self, RunConfig};
use log::info;

#[derive(Debug, Parser)]
#[command(name = "hamassim", version, about = "Learned Hamiltonian dynamics with unscented filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the trajectory dataset.
    Generate,
    /// Train every configured model.
    Train,
    /// Open-loop rollouts from true and perturbed initial states.
    Predict,
    /// Filter simulated measurements with each model.
    Filter,
    /// Write the comparison report and plot tables.
    Evaluate,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let path = cli.config.context("--config <path> is required")?;
    if let Some(j) = cli.jobs {
        anyhow::ensure!(j > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = RunConfig::load(&path)?.with_overrides(cli.seed, cli.out);
    cfg.validate()?;
    match cli.command {
        Command::Generate => {
            let data = pipeline::cmd_generate(&cfg)?;
            info!("{} trajectories", data.trajectories.len());
        }
        Command::Train => {
            for (label, h) in pipeline::cmd_train(&cfg)? {
                let best = h.best_epoch.map(|e| h.val[e]).unwrap_or(f64::NAN);
                println!("{label}: {} epochs, best validation loss {best:e}", h.train.len());
            }
        }
        Command::Predict => {
            for p in pipeline::cmd_predict(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Filter => {
            let written = pipeline::cmd_filter(&cfg)?;
            println!("{} belief files under {}", written.len(), cfg.layout().root.join("filter").display());
        }
        Command::Evaluate => {
            print!("{}", pipeline::cmd_evaluate(&cfg)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
