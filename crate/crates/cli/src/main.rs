//! Command-line runner for federated ADMM experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedadmm::experiment::{run_experiment, run_sweep, ExperimentConfig, EXIT_CONFIG, EXIT_ERROR};

#[derive(Parser)]
#[command(
    name = "fedadmm",
    version,
    about = "Communication-efficient ADMM experiments"
)]
struct Cli {
    /// Override the problem seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve once and write trace.csv and summary.json.
    Run { config: PathBuf },
    /// Repeat over k0 values and seeds and write sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k0: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Solve with every runtime theory check enabled; fail on any violation.
    Check { config: PathBuf },
}

fn load(path: &Path, cli: &Cli) -> fedadmm::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.problem = cfg.problem.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli)?;
            let out = run_experiment(&cfg).context("run failed")?;
            let s = &out.summary;
            println!(
                "{}: converged={} iterations={} rounds={} f(y)={:.10e} |y-x*|_inf={:.3e}",
                s.algorithm.name(),
                s.converged,
                s.iterations,
                s.rounds,
                s.final_objective,
                s.y_error_inf
            );
            Ok(out.exit_code)
        }
        Command::Sweep {
            config,
            k0,
            repeats,
        } => {
            let cfg = load(config, cli)?;
            let cells = run_sweep(&cfg, k0, *repeats).context("sweep failed")?;
            println!("k0\tmean_iterations\tmean_rounds\tconverged/runs");
            for c in &cells {
                println!(
                    "{}\t{:.1}\t{:.1}\t{}/{}",
                    c.k0, c.mean_iterations, c.mean_rounds, c.converged, c.runs
                );
                for f in &c.failures {
                    eprintln!("k0={}: {f}", c.k0);
                }
            }
            Ok(0)
        }
        Command::Check { config } => {
            let mut cfg = load(config, cli)?;
            cfg.theory_check = true;
            let out = run_experiment(&cfg).context("check failed")?;
            let theory = &out.summary.theory;
            if let Some(d) = &theory.descent {
                println!(
                    "descent: {} steps checked, {} violations, worst gap {:.3e}",
                    d.checked,
                    d.violations.len(),
                    d.worst_gap
                );
            }
            if let Some(r) = &theory.rate {
                println!(
                    "rate bound: {} checked, {} violations",
                    r.bound_satisfied_at.len() + r.violations.len(),
                    r.violations.len()
                );
            }
            if let Some(m) = &theory.majorization {
                println!(
                    "curvature majorization: {} steps checked, {} violations, worst gap {:.3e}",
                    m.checked,
                    m.violations.len(),
                    m.worst_gap
                );
            }
            if let Some(e) = &theory.hypothesis_error {
                println!("hypothesis: {e}");
            }
            for v in &theory.identity_violations {
                println!("identity: {v}");
            }
            if theory.passed() {
                println!("all checks passed");
                Ok(out.exit_code)
            } else {
                println!("checks failed");
                Ok(EXIT_ERROR)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err.chain().any(|e| {
                matches!(
                    e.downcast_ref::<fedadmm::Error>(),
                    Some(fedadmm::Error::Config { .. })
                )
            });
            ExitCode::from(if config_error {
                EXIT_CONFIG
            } else {
                EXIT_ERROR
            } as u8)
        }
    }
}
