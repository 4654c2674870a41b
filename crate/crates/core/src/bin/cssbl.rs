use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use cssbl::experiment::{parse_replay, replay, run_experiment, validate, ExperimentSpec, RunOptions};

/// Runs correlation sweeps of the clustering fault-diagnosis engine and
/// writes per-configuration AUC/NMSE tables.
#[derive(Debug, Parser)]
#[command(name = "cssbl", version)]
struct Cli {
    /// Experiment spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; overrides the spec's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trials per configuration; overrides the spec.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Re-run one cell, given as `k,method,trial`, and export its matrices.
    #[arg(long)]
    replay: Option<String>,
    /// Check the spec and exit.
    #[arg(long)]
    validate_only: bool,
    /// Write per-trial convergence traces.
    #[arg(long)]
    traces: bool,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut spec = match ExperimentSpec::load(&cli.spec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    if let Some(t) = cli.trials {
        spec.trials = t;
    }
    let base_dir = cli
        .spec
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let problems = validate(&spec, &base_dir);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("invalid: {p}");
        }
        return ExitCode::from(EXIT_VALIDATION);
    }
    if cli.validate_only {
        println!("spec is valid");
        return ExitCode::SUCCESS;
    }

    let out_dir = cli
        .out
        .clone()
        .or_else(|| spec.output.as_ref().map(|o| base_dir.join(o)))
        .unwrap_or_else(|| PathBuf::from("results"));

    if let Some(coord) = &cli.replay {
        let (k, method, trial) = match parse_replay(coord) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_VALIDATION);
            }
        };
        return match replay(&spec, &base_dir, k, &method, trial, &out_dir) {
            Ok(r) => {
                println!(
                    "k={k} method={method} trial={trial}: auc={} nmse={} converged={} iterations={}",
                    r.auc, r.nmse, r.converged, r.iterations
                );
                println!("exported to {}", out_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error at k={k}, method={method}, trial={trial}: {e}");
                ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { 1 })
            }
        };
    }

    let opts = RunOptions {
        jobs: cli.jobs,
        out_dir: Some(out_dir.clone()),
        traces: cli.traces,
        base_dir,
    };
    match run_experiment(&spec, &opts) {
        Ok(report) => {
            print!("{}", report.to_csv());
            for f in &report.failures {
                eprintln!("failed: k={}, method={}, trial={}: {}", f.k, f.method, f.trial, f.error);
            }
            eprintln!(
                "wrote {} ({:.1} s)",
                out_dir.join("results.csv").display(),
                report.wall_clock_seconds
            );
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
