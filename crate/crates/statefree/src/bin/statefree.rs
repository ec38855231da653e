//! Command-line front end: single runs, plan sweeps, and validation suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use statefree::env::load_env_file;
use statefree::experiment::{
    dyadic_checkpoints, execute_run, load_plan, run_plan, AlgoSpec, RunSettings,
};
use statefree::validate::{run_suite_sized, SUITES};

#[derive(Parser)]
#[command(name = "statefree", version, about = "Tabular episodic RL without prior state-space knowledge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its CSV/JSON artifacts.
    Run {
        /// Environment file (TOML; generator or explicit).
        #[arg(long)]
        env: PathBuf,
        /// Algorithm: ucbvi | ucbvi-arrival | uob-reps, optionally with a
        /// `raw-` prefix (bare learner on the full space) or `-injected`
        /// suffix (reduction with confidence-set injection).
        #[arg(long)]
        algo: String,
        /// Episode budget.
        #[arg(long, short = 't')]
        t: usize,
        /// Confidence level in (0, 1).
        #[arg(long)]
        delta: f64,
        /// Pessimism level (states below this reach probability may be
        /// ignored forever).
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Exploration-bonus constant for the value-iteration learners.
        #[arg(long, default_value_t = 1.0)]
        bonus_constant: f64,
        /// Multiplier on the mirror-descent learning/exploration rates.
        #[arg(long, default_value_t = 1.0)]
        rate_scale: f64,
        /// Inject driver-built confidence sets into the learner each epoch.
        #[arg(long, default_value_t = false)]
        inject: bool,
    },
    /// Execute every (env, algo, seed) cell of a plan file.
    Sweep {
        /// Plan file (TOML).
        #[arg(long)]
        plan: PathBuf,
        /// Output directory; overrides the plan's `out-dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a validation suite and print its JSON report.
    Validate {
        /// Suite name; `--suite list` prints the available suites.
        #[arg(long)]
        suite: String,
        /// Override the Monte Carlo trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> statefree::Result<ExitCode> {
    match cli.command {
        Command::Run { env, algo, t, delta, eps, seed, out, bonus_constant, rate_scale, inject } => {
            let algo = AlgoSpec::parse(&algo, bonus_constant, rate_scale, inject)?;
            let environment = load_env_file(&env)?;
            let name = env
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "env".into());
            let settings = RunSettings { episodes: t, delta, epsilon: eps };
            let summary = execute_run(
                &environment,
                &name,
                &algo,
                settings,
                seed,
                &dyadic_checkpoints(t),
                &out,
            )?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { plan, out } => {
            let (plan_file, plan_dir) = load_plan(&plan)?;
            let out_dir = out
                .or_else(|| plan_file.out_dir.as_ref().map(|d| plan_dir.join(d)))
                .ok_or_else(|| {
                    statefree::Error::Config(
                        "no output directory: set `out-dir` in the plan or pass --out".into(),
                    )
                })?;
            let outcome = run_plan(&plan_file, &plan_dir, &out_dir)?;
            println!(
                "{} runs completed, {} failed; aggregate at {}",
                outcome.summaries.len(),
                outcome.failures.len(),
                outcome.aggregate_path.display()
            );
            for (id, err) in &outcome.failures {
                eprintln!("run {id} failed: {err}");
            }
            Ok(if outcome.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Validate { suite, trials } => {
            if suite == "help" || suite == "list" {
                println!("available suites: {}", SUITES.join(", "));
                return Ok(ExitCode::SUCCESS);
            }
            let report = run_suite_sized(&suite, trials)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
