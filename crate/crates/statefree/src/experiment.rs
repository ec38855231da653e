//! Experiment plans and file outputs.
//!
//! A run produces two artifacts in the output directory:
//!
//! - `<run-id>.csv` with the fixed columns
//!   `episode,cum_realized_loss,cum_expected_regret,cum_realized_regret,pruned_size,restarts`,
//!   one row per checkpoint (dyadic by default, always including `T`);
//! - `<run-id>.json` with the final numbers, the admission/restart timeline,
//!   and an echo of the configuration.
//!
//! A sweep executes a grid of (environment, algorithm, seed) runs on a
//! worker pool — each run is isolated and seeded, so the grid is
//! reproducible — and writes `aggregate.csv` with one row per run. Per-run
//! failures are recorded in the aggregate rather than aborting the grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{run as run_reduction, run_standalone, InjectionMode, RunLog, SfRlConfig};
use crate::env::{load_env_file, GeneratedEnv};
use crate::error::{Error, Result};
use crate::learners::LearnerConfig;
use crate::reachability::DEFAULT_ADMISSION_CONSTANT;

/// Whether the algorithm is the state-free reduction or the bare learner on
/// the full space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoMode {
    Reduction,
    Standalone,
}

/// One algorithm configuration of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AlgoSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub mode: AlgoMode,
    pub learner: LearnerConfig,
    #[serde(default)]
    pub inject: bool,
    #[serde(default = "default_admission_constant")]
    pub admission_constant: f64,
}

fn default_admission_constant() -> f64 {
    DEFAULT_ADMISSION_CONSTANT
}

impl AlgoSpec {
    /// Display identifier.
    pub fn id(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut id = String::new();
        if self.mode == AlgoMode::Standalone {
            id.push_str("raw-");
        }
        id.push_str(self.learner.name());
        if self.inject {
            id.push_str("-injected");
        }
        id
    }

    /// Resolve a command-line algorithm name.
    ///
    /// Accepted: `ucbvi`, `ucbvi-arrival`, `uob-reps` (reduction mode),
    /// `uob-reps-injected` (reduction with confidence injection), and the
    /// `raw-` prefixed variants for bare learners on the full space.
    pub fn parse(name: &str, bonus_constant: f64, rate_scale: f64, inject: bool) -> Result<Self> {
        let (mode, rest) = match name.strip_prefix("raw-") {
            Some(rest) => (AlgoMode::Standalone, rest),
            None => (AlgoMode::Reduction, name),
        };
        let (rest, inject_suffix) = match rest.strip_suffix("-injected") {
            Some(r) => (r, true),
            None => (rest, false),
        };
        let learner = match rest {
            "ucbvi" => LearnerConfig::Ucbvi { bonus_constant },
            "ucbvi-arrival" => LearnerConfig::UcbviArrival { bonus_constant },
            "uob-reps" => LearnerConfig::UobReps { rate_scale },
            other => {
                return Err(Error::Config(format!(
                    "unknown algorithm `{other}`; expected ucbvi | ucbvi-arrival | uob-reps \
                     (optionally raw- prefixed or -injected suffixed)"
                )))
            }
        };
        let inject = inject || inject_suffix;
        if inject && mode == AlgoMode::Standalone {
            return Err(Error::Config("confidence injection requires the reduction mode".into()));
        }
        Ok(Self { name: None, mode, learner, inject, admission_constant: DEFAULT_ADMISSION_CONSTANT })
    }
}

/// Scalar settings shared by every run of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunSettings {
    pub episodes: usize,
    pub delta: f64,
    #[serde(default)]
    pub epsilon: f64,
}

/// A sweep plan: the grid plus output checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PlanFile {
    pub episodes: usize,
    pub delta: f64,
    #[serde(default)]
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    /// Paths to environment files, relative to the plan file.
    pub envs: Vec<PathBuf>,
    pub algos: Vec<AlgoSpec>,
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    /// Output directory, relative to the plan file; callers may override.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Dyadic checkpoints `1, 2, 4, ...` capped at `t`, plus `t` itself.
pub fn dyadic_checkpoints(t: usize) -> Vec<usize> {
    let mut points = Vec::new();
    let mut c = 1usize;
    while c < t {
        points.push(c);
        c *= 2;
    }
    if t > 0 {
        points.push(t);
    }
    points
}

/// Summary row of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub env: String,
    pub algo: String,
    pub seed: u64,
    pub episodes: usize,
    pub final_cum_realized_loss: f64,
    pub final_expected_regret: f64,
    pub final_realized_regret: f64,
    pub final_pruned_size: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunReport {
    summary: RunSummary,
    delta: f64,
    epsilon: f64,
    algo_config: AlgoSpec,
    admissions: Vec<(usize, usize, usize)>,
    restart_episodes: Vec<(usize, f64)>,
}

/// Execute one run and write its CSV and JSON artifacts. Returns the
/// summary row.
pub fn execute_run(
    env: &GeneratedEnv,
    env_name: &str,
    algo: &AlgoSpec,
    settings: RunSettings,
    seed: u64,
    checkpoints: &[usize],
    out_dir: &Path,
) -> Result<RunSummary> {
    let log = run_algo(env, algo, settings, seed)?;
    let run_id = format!("{env_name}__{}__s{seed}", algo.id());
    let summary = summarize(&log, &run_id, env_name, &algo.id(), seed, settings.episodes);

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(format!("{run_id}.csv")), render_csv(&log, checkpoints))?;
    let report = RunReport {
        summary: summary.clone(),
        delta: settings.delta,
        epsilon: settings.epsilon,
        algo_config: algo.clone(),
        admissions: log.admissions.iter().map(|&(t, s)| (t, s.layer, s.index)).collect(),
        restart_episodes: log.restarts.clone(),
    };
    fs::write(out_dir.join(format!("{run_id}.json")), serde_json::to_string_pretty(&report)?)?;
    Ok(summary)
}

/// Run an algorithm on an environment without touching the filesystem.
pub fn run_algo(
    env: &GeneratedEnv,
    algo: &AlgoSpec,
    settings: RunSettings,
    seed: u64,
) -> Result<RunLog> {
    match algo.mode {
        AlgoMode::Reduction => {
            let mut cfg = SfRlConfig::new(
                settings.delta,
                settings.epsilon,
                settings.episodes,
                algo.learner.clone(),
            );
            cfg.admission_constant = algo.admission_constant;
            if algo.inject {
                cfg = cfg.with_injection(InjectionMode::ImprovedSet);
            }
            run_reduction(cfg, &env.mdp, &env.loss, seed)
        }
        AlgoMode::Standalone => run_standalone(
            &algo.learner,
            &env.mdp,
            &env.loss,
            settings.episodes,
            settings.delta,
            seed,
            true,
        ),
    }
}

fn summarize(
    log: &RunLog,
    run_id: &str,
    env: &str,
    algo: &str,
    seed: u64,
    episodes: usize,
) -> RunSummary {
    RunSummary {
        run_id: run_id.into(),
        env: env.into(),
        algo: algo.into(),
        seed,
        episodes,
        final_cum_realized_loss: log.cum_realized_loss().last().copied().unwrap_or(0.0),
        final_expected_regret: log.final_expected_regret().unwrap_or(f64::NAN),
        final_realized_regret: log.final_realized_regret(),
        final_pruned_size: log.final_pruned_size,
        restarts: log.restarts.len(),
    }
}

/// Render the per-run CSV at the given checkpoints.
pub fn render_csv(log: &RunLog, checkpoints: &[usize]) -> String {
    let realized = log.cum_realized_loss();
    let realized_regret = log.cum_realized_regret();
    let expected_regret = log.cum_expected_regret();
    let mut out =
        String::from("episode,cum_realized_loss,cum_expected_regret,cum_realized_regret,pruned_size,restarts\n");
    for &cp in checkpoints {
        if cp == 0 || cp > log.records.len() {
            continue;
        }
        let i = cp - 1;
        let rec = &log.records[i];
        let exp = expected_regret.as_ref().map(|v| v[i]).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            cp, realized[i], exp, realized_regret[i], rec.pruned_size, rec.restarts
        );
    }
    out
}

/// Outcome of a sweep: summaries in deterministic order plus per-run errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<(String, String)>,
    pub aggregate_path: PathBuf,
}

/// Execute every (env, algo, seed) cell of the plan on a worker pool and
/// write the aggregate CSV.
pub fn run_plan(plan: &PlanFile, plan_dir: &Path, out_dir: &Path) -> Result<PlanOutcome> {
    if plan.envs.is_empty() || plan.algos.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config("plan grid must be nonempty".into()));
    }
    let settings =
        RunSettings { episodes: plan.episodes, delta: plan.delta, epsilon: plan.epsilon };
    let checkpoints =
        plan.checkpoints.clone().unwrap_or_else(|| dyadic_checkpoints(plan.episodes));

    // Load environments up front; a broken env file is a configuration
    // error, not a per-run failure.
    let mut envs = Vec::new();
    for path in &plan.envs {
        let resolved = if path.is_absolute() { path.clone() } else { plan_dir.join(path) };
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "env".into());
        let env = load_env_file(&resolved)
            .map_err(|e| Error::Config(format!("env `{}`: {e}", resolved.display())))?;
        envs.push((name, env));
    }

    let mut ids = std::collections::BTreeSet::new();
    for (name, _) in &envs {
        for algo in &plan.algos {
            if !ids.insert(format!("{name}__{}", algo.id())) {
                return Err(Error::Config(format!(
                    "duplicate run identifier `{name}__{}`; give algos distinct names",
                    algo.id()
                )));
            }
        }
    }

    let grid: Vec<(usize, usize, u64)> = envs
        .iter()
        .enumerate()
        .flat_map(|(e, _)| {
            plan.algos
                .iter()
                .enumerate()
                .flat_map(move |(a, _)| plan.seeds.iter().map(move |&s| (e, a, s)))
        })
        .collect();

    fs::create_dir_all(out_dir)?;
    let results: Vec<std::result::Result<RunSummary, (String, String)>> = grid
        .par_iter()
        .map(|&(e, a, seed)| {
            let (name, env) = &envs[e];
            let algo = &plan.algos[a];
            execute_run(env, name, algo, settings, seed, &checkpoints, out_dir).map_err(|err| {
                (format!("{name}__{}__s{seed}", algo.id()), err.to_string())
            })
        })
        .collect();

    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => summaries.push(s),
            Err(f) => failures.push(f),
        }
    }
    summaries.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    failures.sort();

    let mut agg = String::from(
        "run_id,env,algo,seed,episodes,final_cum_realized_loss,final_expected_regret,\
         final_realized_regret,final_pruned_size,restarts\n",
    );
    for s in &summaries {
        let _ = writeln!(
            agg,
            "{},{},{},{},{},{},{},{},{},{}",
            s.run_id,
            s.env,
            s.algo,
            s.seed,
            s.episodes,
            s.final_cum_realized_loss,
            s.final_expected_regret,
            s.final_realized_regret,
            s.final_pruned_size,
            s.restarts
        );
    }
    for (id, err) in &failures {
        let _ = writeln!(agg, "{id},,,,,FAILED: {},,,,", err.replace(',', ";"));
    }
    let aggregate_path = out_dir.join("aggregate.csv");
    fs::write(&aggregate_path, agg)?;
    Ok(PlanOutcome { summaries, failures, aggregate_path })
}

/// Load a plan file.
pub fn load_plan(path: &Path) -> Result<(PlanFile, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let plan: PlanFile = toml::from_str(&text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok((plan, dir))
}
