use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nullport::harness::{self, ExperimentConfig};
use nullport::{ClockMode, Error};

#[derive(Parser)]
#[command(name = "nullport", version, about = "Null-space teleportation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed with teleport phases.
    Train(Common),
    /// Time both teleport methods over the t/d/n/l/b grid.
    BenchScaling(Common),
    /// Sweep the energy threshold tau on one model snapshot.
    ErrorControl(Common),
    /// No teleport vs symmetry vs nullspace, per seed.
    CompareBaseline(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run this seed only, replacing the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-layer basis construction.
    #[arg(long)]
    threads: Option<usize>,
    /// Report wall-clock time instead of process CPU time.
    #[arg(long)]
    real_time: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::from_json("{}")?,
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if self.real_time {
            cfg.clock = ClockMode::Real;
        }
        cfg.resolve()
    }
}

fn run(cmd: &Command) -> Result<()> {
    let (Command::Train(common)
    | Command::BenchScaling(common)
    | Command::ErrorControl(common)
    | Command::CompareBaseline(common)) = cmd;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = common.load()?;
    let out: &Path = &common.out;
    match cmd {
        Command::Train(_) => {
            for r in harness::cmd_train(&cfg, out)? {
                println!(
                    "seed {}: train loss {:.6}, test accuracy {}, {} teleport steps",
                    r.seed,
                    r.final_train_loss,
                    r.final_test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    r.teleport_steps
                );
            }
        }
        Command::BenchScaling(_) => {
            for r in harness::cmd_bench_scaling(&cfg, out)? {
                println!(
                    "{:?} {}={:<4} {:.4}s svd={} inv={}",
                    r.method, r.axis, r.value, r.seconds, r.svd_calls, r.inverse_calls
                );
            }
        }
        Command::ErrorControl(_) => {
            for s in harness::cmd_error_control(&cfg, out)? {
                println!("tau {}: max relative drift {:.3e}", s.tau, s.max_relative_drift);
            }
        }
        Command::CompareBaseline(_) => {
            for r in harness::cmd_compare_baseline(&cfg, out)? {
                println!("{} seed {}: train loss {:.6}", r.label, r.seed, r.final_train_loss);
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
