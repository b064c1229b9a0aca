use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phibal::checks::{run_all, CheckOptions};
use phibal::experiment::{parse_config, resolve_jobs, run_plan, ExperimentPlan, RunStatus};
use phibal::trainer::compute_token_budget;
use phibal::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_CHECK: u8 = 3;

const DEFAULT_OUT: &str = "phibal-out";

#[derive(Parser)]
#[command(name = "phibal", version, about = "Potential-based MoE load balancing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base configuration once and write its CSV.
    Run {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Run every configuration of the plan's sweep and write a summary.
    Sweep {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Worker threads; PHIBAL_DETERMINISTIC=1 forces 1.
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
    /// Run the identity and gradient self-checks.
    Check {
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Multiplier applied to every numeric tolerance.
        #[arg(long, value_name = "F", default_value_t = 1.0)]
        check_tolerance: f64,
    },
    /// Compute-optimal parameter and token counts for compute budgets (FLOPs).
    Budget {
        #[arg(required = true, value_name = "C")]
        compute: Vec<f64>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentPlan, Error> {
    let mut plan = parse_config(config)?;
    if let Some(s) = seed {
        plan.base.seed = s;
    }
    Ok(plan)
}

fn execute(plan: &ExperimentPlan, out: &Path, jobs: usize) -> ExitCode {
    let outcome = match run_plan(plan, out, jobs) {
        Ok(o) => o,
        Err(e) => return fail(error_code(&e), e),
    };
    let mut code = 0;
    for r in &outcome.runs {
        match &r.status {
            RunStatus::Completed { csv } => println!("ok     {:<24} seed {:<6} {}", r.spec.label, r.spec.config.seed, csv.display()),
            RunStatus::Failed { error, snapshot } => {
                println!("failed {:<24} seed {:<6} {error}", r.spec.label, r.spec.config.seed);
                if let Some(s) = snapshot {
                    println!("       snapshot {}", s.display());
                }
                code = code.max(error_code(error));
            }
        }
    }
    println!("summary {}", outcome.summary.display());
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, out, seed } => {
            let plan = match load(&config, seed) {
                Ok(p) => p,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            if plan.axis.is_some() {
                eprintln!("note: `run` ignores the [sweep] table; use `sweep` to run it");
            }
            let out = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            execute(&ExperimentPlan::single(plan.base), &out, 1)
        }
        Command::Sweep { config, out, seed, jobs } => {
            let plan = match load(&config, seed) {
                Ok(p) => p,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            let out = out.or_else(|| plan.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            execute(&plan, &out, resolve_jobs(jobs))
        }
        Command::Check { seed, check_tolerance } => {
            if !(check_tolerance > 0.0 && check_tolerance.is_finite()) {
                return fail(EXIT_CONFIG, format!("--check-tolerance must be positive, got {check_tolerance}"));
            }
            let report = run_all(&CheckOptions {
                seed,
                tolerance: check_tolerance,
            });
            for o in &report.outcomes {
                let mark = if o.passed { "PASS" } else { "FAIL" };
                println!("{mark} {:<18} {:>8.2?}  {}", o.name, o.elapsed, o.detail);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK)
            }
        }
        Command::Budget { compute } => {
            println!("{:>12} {:>16} {:>16} {:>10}", "compute", "params", "tokens", "tokens/param");
            for c in compute {
                match compute_token_budget(c) {
                    Ok(b) => println!("{c:>12.3e} {:>16.6e} {:>16.6e} {:>10.4}", b.params, b.tokens, b.tokens_per_param),
                    Err(e) => return fail(EXIT_CONFIG, e),
                }
            }
            ExitCode::SUCCESS
        }
    }
}
