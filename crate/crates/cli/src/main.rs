use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densify_core::data::io::{read_pfm, write_pfm};
use densify_core::data::{sample_sparse, SamplePattern};
use densify_core::experiment::gradcheck::{run_gradcheck_suite, Scope};
use densify_core::experiment::{run_eval, run_training, ExperimentConfig};
use densify_core::guidance::MemoryModel;
use densify_core::Error;

#[derive(Parser)]
#[command(name = "densify", version, about = "Guided depth completion on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes the checkpoint and run record.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out scenes of a config.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Kernel memory of dynamic, factorized and efficient guidance.
    Memreport {
        #[arg(long = "C", default_value_t = 128)]
        c: u64,
        #[arg(long = "H", default_value_t = 128)]
        h: u64,
        #[arg(long = "W", default_value_t = 608)]
        w: u64,
        #[arg(long = "R", default_value_t = 3)]
        r: u64,
        /// Print CSV instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Finite-difference gradient checks: primitives, modules or full.
    Gradcheck {
        #[arg(long)]
        scope: String,
    },
    /// Subsample a dense PFM depth map.
    Sample {
        /// uniform:N, gaussian:N:SIGMA or grid:SY:SX
        #[arg(long)]
        pattern: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Outcome {
    Ok,
    Failed,
}

fn run(command: Command) -> densify_core::Result<Outcome> {
    match command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (dir, record) = run_training(&cfg)?;
            println!("run directory: {}", dir.display());
            println!("config hash:   {}", record.config_hash);
            println!("steps:         {}", record.steps);
            println!(
                "training loss: {:.6} -> {:.6} ({:.1}x)",
                record.initial_loss,
                record.final_loss,
                record.loss_reduction()
            );
            if let (Some(m), Some(c)) = (record.metrics, record.coarse_metrics) {
                println!("held-out RMSE: refined {:.4}, coarse {:.4}", m.rmse, c.rmse);
            }
            println!("wall time:     {:.1}s", record.wall_time_s);
        }
        Command::Eval { ckpt, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (path, report) = run_eval(&cfg, &ckpt)?;
            let mean = report.mean_refined()?;
            println!("wrote {}", path.display());
            println!(
                "mean over {} scenes: RMSE {:.4} MAE {:.4} REL {:.4} delta1 {:.2}",
                report.scenes.len(),
                mean.rmse,
                mean.mae,
                mean.rel,
                mean.delta1
            );
        }
        Command::Memreport { c, h, w, r, csv } => {
            let report = MemoryModel::new(c, h, w, r)?.report()?;
            print!("{}", if csv { report.to_csv() } else { report.to_text() });
        }
        Command::Gradcheck { scope } => {
            let scope: Scope = scope.parse()?;
            let results = run_gradcheck_suite(scope)?;
            println!("{:<24} {:>8} {:>8} {:>12} {:>8}  result", "check", "checked", "flagged", "max_rel_err", "tol");
            let mut all = true;
            for r in &results {
                let p = &r.report;
                all &= p.passed;
                println!(
                    "{:<24} {:>8} {:>8} {:>12.3e} {:>8.0e}  {}",
                    r.name,
                    p.checked,
                    p.flagged,
                    p.max_rel_error,
                    p.tol,
                    if p.passed { "PASS" } else { "FAIL" }
                );
            }
            if !all {
                return Ok(Outcome::Failed);
            }
        }
        Command::Sample {
            pattern,
            input,
            out,
            seed,
        } => {
            let pattern: SamplePattern = pattern.parse()?;
            let dense = read_pfm(&input)?;
            let sparse = sample_sparse(&dense, pattern, seed)?;
            write_pfm(&out, &sparse)?;
            println!("kept {} of {} valid pixels ({pattern})", sparse.valid_count(), dense.valid_count());
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
