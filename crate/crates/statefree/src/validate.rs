//! Executable validation suites for the statistical guarantees.
//!
//! Each suite checks one testable statement and produces a machine-readable
//! report. Exact statements are verified by full enumeration at desk scale;
//! probabilistic ones by seeded Monte Carlo against their nominal failure
//! rates plus three binomial standard errors.
//!
//! Suites:
//!
//! - `lemma1-exact` — the distribution of pruned trajectories obtained by
//!   sampling in the full space and rewriting equals, entry for entry, the
//!   distribution of executing the restricted policy directly on the pruned
//!   model with pruned losses.
//! - `lemma3-sandwich` — for any policy, the pruned expected loss
//!   under-approximates the true expected loss by at most `H` times the
//!   occupancy mass outside the pruned space.
//! - `lemma2-soundness` — states the driver admits really are reachable
//!   above the pessimism level, up to the admission confidence.
//! - `lemma4-coverage` — the improved confidence set contains the true
//!   pruned transition at every epoch, up to its confidence.
//! - `lemma8-mc` — the anytime supermartingale bounds behind the admission
//!   test hold at their nominal rates.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{allocate_confidence, improved_interval_1, improved_interval_2};
use crate::driver::{run as run_driver, SfRl, SfRlConfig};
use crate::env::{generate_env, EnvFamilySpec, LossGenSpec};
use crate::error::{Error, Result};
use crate::learners::LearnerConfig;
use crate::mdp::{
    compute_occupancy, expected_loss, LayeredMdp, LossModel, Policy, SaTable, SpaceShape, State,
};
use crate::pruned::{
    build_pruned_transition, prune_trajectory, pruned_loss, restrict_policy, PrunedSpace,
};
use crate::reachability::{lemma8_monte_carlo, SequenceFamily};

/// One check of a suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured quantity (deviation, rate, ...).
    pub measured: f64,
    /// The bound it must respect.
    pub bound: f64,
    pub details: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, bound: f64, details: String) -> Self {
        Self { name: name.into(), passed: measured <= bound, measured, bound, details }
    }
}

/// A suite's machine-readable report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: &str, checks: Vec<CheckResult>) -> Self {
        Self { suite: suite.into(), passed: checks.iter().all(|c| c.passed), checks }
    }
}

pub const SUITES: &[&str] =
    &["lemma1-exact", "lemma3-sandwich", "lemma2-soundness", "lemma4-coverage", "lemma8-mc"];

/// Run a named suite at its default size.
pub fn run_suite(name: &str) -> Result<SuiteReport> {
    run_suite_sized(name, None)
}

/// Run a named suite, optionally overriding its Monte Carlo trial count.
pub fn run_suite_sized(name: &str, trials: Option<usize>) -> Result<SuiteReport> {
    match name {
        "lemma1-exact" => Ok(lemma1_suite()),
        "lemma3-sandwich" => Ok(lemma3_suite(trials.unwrap_or(120))),
        "lemma2-soundness" => Ok(lemma2_suite(trials.unwrap_or(500))),
        "lemma4-coverage" => Ok(lemma4_suite(trials.unwrap_or(1000))),
        "lemma8-mc" => Ok(lemma8_suite(trials.unwrap_or(10_000))),
        _ => Err(Error::UnknownSuite { name: name.into(), available: SUITES.join(", ") }),
    }
}

// ---------------------------------------------------------------------------
// Exact trajectory-distribution equivalence
// ---------------------------------------------------------------------------

/// Key identifying a trajectory exactly (losses by bit pattern; losses here
/// come from deterministic tables, so bit equality is the right notion).
pub type TrajectoryKey = (usize, Vec<(usize, usize, u64)>);

/// Exact distribution over trajectories of `(mdp, policy)` with
/// deterministic per-`(s, a)` losses from `table`, pushed through an
/// optional rewrite.
pub fn enumerate_trajectory_distribution(
    mdp: &LayeredMdp,
    policy: &Policy,
    table: &SaTable,
    rewrite: impl Fn(&crate::mdp::Trajectory) -> crate::mdp::Trajectory,
) -> BTreeMap<TrajectoryKey, f64> {
    let horizon = mdp.horizon();
    let mut out: BTreeMap<TrajectoryKey, f64> = BTreeMap::new();
    // Depth-first over (a_0, s_1, a_1, ..., s_H, a_H).
    struct Frame {
        prob: f64,
        start_action: usize,
        steps: Vec<crate::mdp::Step>,
    }
    let mut stack: Vec<Frame> = Vec::new();
    for a0 in 0..mdp.num_actions() {
        let p = policy.prob(State::new(0, 0), a0);
        if p > 0.0 {
            stack.push(Frame { prob: p, start_action: a0, steps: Vec::new() });
        }
    }
    while let Some(frame) = stack.pop() {
        let h = frame.steps.len() + 1;
        if h > horizon {
            let traj = crate::mdp::Trajectory {
                start_action: frame.start_action,
                steps: frame.steps.clone(),
            };
            let rewritten = rewrite(&traj);
            let key: TrajectoryKey = (
                rewritten.start_action,
                rewritten
                    .steps
                    .iter()
                    .map(|s| (s.state, s.action, s.loss.to_bits()))
                    .collect(),
            );
            *out.entry(key).or_insert(0.0) += frame.prob;
            continue;
        }
        let (prev_state, prev_action) = if h == 1 {
            (State::new(0, 0), frame.start_action)
        } else {
            let last = frame.steps.last().unwrap();
            (State::new(h - 1, last.state), last.action)
        };
        for s in 0..mdp.layer_size(h) {
            let p_s = mdp.prob(prev_state, prev_action, s);
            if p_s == 0.0 {
                continue;
            }
            let state = State::new(h, s);
            for a in 0..mdp.num_actions() {
                let p_a = policy.prob(state, a);
                if p_a == 0.0 {
                    continue;
                }
                let mut steps = frame.steps.clone();
                steps.push(crate::mdp::Step { state: s, action: a, loss: table.get(state, a) });
                stack.push(Frame {
                    prob: frame.prob * p_s * p_a,
                    start_action: frame.start_action,
                    steps,
                });
            }
        }
    }
    out
}

/// Largest entrywise deviation between (a) the pruned-trajectory
/// distribution induced by sampling in the full space and rewriting, and
/// (b) the distribution of executing the restricted policy on the pruned
/// model with pruned losses.
pub fn trajectory_equivalence_deviation(
    mdp: &LayeredMdp,
    space: &PrunedSpace,
    full_policy: &Policy,
    table: &SaTable,
) -> Result<f64> {
    let sample_then_prune = enumerate_trajectory_distribution(mdp, full_policy, table, |o| {
        prune_trajectory(o, space)
    });
    let pruned_mdp = build_pruned_transition(mdp, space)?;
    let pruned_policy = restrict_policy(full_policy, space);
    let pruned_table = pruned_loss(table, space);
    let direct = enumerate_trajectory_distribution(&pruned_mdp, &pruned_policy, &pruned_table, |o| {
        o.clone()
    });
    let mut worst: f64 = 0.0;
    for key in sample_then_prune.keys().chain(direct.keys()) {
        let a = sample_then_prune.get(key).copied().unwrap_or(0.0);
        let b = direct.get(key).copied().unwrap_or(0.0);
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

fn lemma1_fixture() -> (LayeredMdp, PrunedSpace, Policy, SaTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let env = generate_env(&EnvFamilySpec {
        horizon: 3,
        reachable_per_layer: vec![3, 3, 2],
        padded_per_layer: vec![0, 0, 0],
        num_actions: 2,
        seed: 314,
        loss: LossGenSpec::StochasticUniform { lo: 0.0, hi: 1.0 },
    })
    .expect("fixture generates");
    let mdp = env.mdp;
    // Strict subset: drop one state per layer where possible.
    let mut space = PrunedSpace::new(3, 2);
    space.admit(&[
        State::new(1, 0),
        State::new(1, 2),
        State::new(2, 1),
        State::new(3, 0),
    ]);
    let table = {
        let mut t = SaTable::zeros(mdp.shape());
        for h in 1..=3 {
            for s in 0..mdp.layer_size(h) {
                for a in 0..2 {
                    t.set(State::new(h, s), a, (rng.gen::<f64>() * 16.0).round() / 16.0);
                }
            }
        }
        t
    };
    let policy = {
        let shape = mdp.shape();
        let rows = (0..=3)
            .map(|h| {
                (0..shape.layer_sizes[h])
                    .map(|_| {
                        let mut row: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() + 0.1).collect();
                        let s: f64 = row.iter().sum();
                        row.iter_mut().for_each(|p| *p /= s);
                        row
                    })
                    .collect()
            })
            .collect();
        Policy::new(rows).unwrap()
    };
    (mdp, space, policy, table)
}

fn lemma1_suite() -> SuiteReport {
    let (mdp, space, policy, table) = lemma1_fixture();
    let deviation = trajectory_equivalence_deviation(&mdp, &space, &policy, &table)
        .expect("fixture is well-formed");
    SuiteReport::new(
        "lemma1-exact",
        vec![CheckResult::at_most(
            "pruned-trajectory distribution equivalence",
            deviation,
            1e-12,
            "max entrywise deviation between sample-then-prune and direct pruned execution".into(),
        )],
    )
}

// ---------------------------------------------------------------------------
// Value-gap sandwich
// ---------------------------------------------------------------------------

/// For one `(mdp, space, policy, loss)` tuple: the gap
/// `<q, l> - <q_pruned, l_pruned>` and its upper bound
/// `H * sum_{s not admitted} q(s)`.
pub fn value_gap(
    mdp: &LayeredMdp,
    space: &PrunedSpace,
    policy: &Policy,
    table: &SaTable,
) -> Result<(f64, f64)> {
    let q = compute_occupancy(mdp, policy)?;
    let full_value = expected_loss(&q, table)?;
    let pruned_mdp = build_pruned_transition(mdp, space)?;
    let pruned_policy = restrict_policy(policy, space);
    let q_pruned = compute_occupancy(&pruned_mdp, &pruned_policy)?;
    let pruned_value = expected_loss(&q_pruned, &pruned_loss(table, space))?;
    let mut outside_mass = 0.0;
    for h in 1..=mdp.horizon() {
        for s in 0..mdp.layer_size(h) {
            let state = State::new(h, s);
            if !space.contains(state) {
                for a in 0..mdp.num_actions() {
                    outside_mass += q.get(state, a);
                }
            }
        }
    }
    Ok((full_value - pruned_value, mdp.horizon() as f64 * outside_mass))
}

fn lemma3_suite(instances: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mut worst_low: f64 = 0.0; // most negative gap, negated
    let mut worst_high: f64 = 0.0; // largest gap - bound
    for i in 0..instances {
        let env = generate_env(&EnvFamilySpec {
            horizon: 3,
            reachable_per_layer: vec![2, 3, 2],
            padded_per_layer: vec![0, 0, 0],
            num_actions: 2,
            seed: 1000 + i as u64,
            loss: LossGenSpec::StochasticUniform { lo: 0.0, hi: 1.0 },
        })
        .expect("fixture generates");
        let mdp = env.mdp;
        let shape = mdp.shape().clone();
        // Random strict-subset space (possibly empty per layer).
        let mut space = PrunedSpace::new(3, 2);
        let mut to_admit = Vec::new();
        for h in 1..=3 {
            for s in 0..shape.layer_sizes[h] {
                if rng.gen::<f64>() < 0.6 {
                    to_admit.push(State::new(h, s));
                }
            }
        }
        space.admit(&to_admit);
        let policy = {
            let rows = (0..=3)
                .map(|h| {
                    (0..shape.layer_sizes[h])
                        .map(|_| {
                            let mut row: Vec<f64> =
                                (0..2).map(|_| rng.gen::<f64>() + 0.02).collect();
                            let s: f64 = row.iter().sum();
                            row.iter_mut().for_each(|p| *p /= s);
                            row
                        })
                        .collect()
                })
                .collect();
            Policy::new(rows).unwrap()
        };
        let mut table = SaTable::zeros(&shape);
        for h in 1..=3 {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..2 {
                    table.set(State::new(h, s), a, rng.gen::<f64>());
                }
            }
        }
        let (gap, bound) = value_gap(&mdp, &space, &policy, &table).expect("well-formed");
        worst_low = worst_low.max(-gap);
        worst_high = worst_high.max(gap - bound);
    }
    SuiteReport::new(
        "lemma3-sandwich",
        vec![
            CheckResult::at_most(
                "gap nonnegative",
                worst_low,
                1e-10,
                format!("max negative part of the gap over {instances} random instances"),
            ),
            CheckResult::at_most(
                "gap below outside-mass bound",
                worst_high,
                1e-10,
                format!("max excess of the gap over H * outside mass over {instances} instances"),
            ),
        ],
    )
}

// ---------------------------------------------------------------------------
// Admission soundness
// ---------------------------------------------------------------------------

/// Fixture with one state at reach `eps / 2` and everything else at
/// `>= 2 eps` (eps = 0.1): a single action, layer 1 splitting 0.95 / 0.05.
fn soundness_fixture() -> (LayeredMdp, LossModel, f64) {
    let shape = SpaceShape::new(vec![1, 2, 1, 1], 1).unwrap();
    let rows = vec![
        vec![vec![vec![0.95, 0.05]]],
        vec![vec![vec![1.0]], vec![vec![1.0]]],
        vec![vec![vec![1.0]]],
    ];
    let mdp = LayeredMdp::new(shape.clone(), rows).unwrap();
    let mut means = SaTable::zeros(&shape);
    means.set(State::new(1, 0), 0, 0.3);
    means.set(State::new(1, 1), 0, 0.7);
    means.set(State::new(2, 0), 0, 0.5);
    (mdp, LossModel::Stochastic(means), 0.1)
}

fn lemma2_suite(runs: usize) -> SuiteReport {
    let (mdp, loss, eps) = soundness_fixture();
    let delta = 0.1;
    let sub_eps_state = State::new(1, 1);
    let episodes = 1500;
    let outcomes: Vec<(bool, bool)> = (0..runs as u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = SfRlConfig::new(
                delta,
                eps,
                episodes,
                LearnerConfig::Ucbvi { bonus_constant: 1.0 },
            );
            cfg.track_expected = false;
            let log = run_driver(cfg, &mdp, &loss, 90_000 + seed).expect("run succeeds");
            let violated = log.admissions.iter().any(|(_, s)| *s == sub_eps_state);
            // The genuinely reachable states should be getting admitted.
            let fully_admitted = log.admissions.iter().any(|(_, s)| *s == State::new(1, 0))
                && log.admissions.iter().any(|(_, s)| *s == State::new(2, 0));
            (violated, fully_admitted)
        })
        .collect();
    let violations = outcomes.iter().filter(|o| o.0).count();
    let full_admissions = outcomes.iter().filter(|o| o.1).count();
    let rate = violations as f64 / runs as f64;
    let tol = 3.0 * (delta * (1.0 - delta) / runs as f64).sqrt();
    let admitted_rate = full_admissions as f64 / runs as f64;
    SuiteReport::new(
        "lemma2-soundness",
        vec![
            CheckResult::at_most(
                "sub-threshold admission rate",
                rate,
                delta + tol,
                format!(
                    "state with max reach eps/2 admitted in {violations}/{runs} runs \
                     (T = {episodes}, delta = {delta}, eps = {eps})"
                ),
            ),
            CheckResult::at_most(
                "reachable states admitted",
                1.0 - admitted_rate,
                0.01,
                format!("both >=2eps states admitted in {full_admissions}/{runs} runs"),
            ),
        ],
    )
}

// ---------------------------------------------------------------------------
// Improved-set coverage
// ---------------------------------------------------------------------------

fn lemma4_suite(runs: usize) -> SuiteReport {
    let env = generate_env(&EnvFamilySpec {
        horizon: 2,
        reachable_per_layer: vec![2, 2],
        padded_per_layer: vec![0, 0],
        num_actions: 2,
        seed: 555,
        loss: LossGenSpec::StochasticUniform { lo: 0.1, hi: 0.9 },
    })
    .expect("fixture generates");
    let delta = 0.1;
    let episodes = 250;
    let violating_runs = (0..runs as u64)
        .into_par_iter()
        .filter(|&seed| {
            let mut cfg =
                SfRlConfig::new(delta, 0.0, episodes, LearnerConfig::Ucbvi { bonus_constant: 1.0 });
            cfg.track_expected = false;
            let mut driver = SfRl::new(cfg, &env.mdp, &env.loss, 40_000 + seed).expect("driver");
            for t in 1..=episodes {
                // The epoch-t set is built from episodes before t.
                if !improved_set_covers(driver.stats(), driver.space(), &env.mdp, t, delta) {
                    return true;
                }
                driver.step().expect("step");
            }
            false
        })
        .count();
    let rate = violating_runs as f64 / runs as f64;
    let tol = 3.0 * (delta * (1.0 - delta) / runs as f64).sqrt();
    SuiteReport::new(
        "lemma4-coverage",
        vec![CheckResult::at_most(
            "true-transition coverage failure rate",
            rate,
            delta + tol,
            format!(
                "{violating_runs}/{runs} runs had some epoch/triple outside both intervals \
                 (T = {episodes}, delta = {delta})"
            ),
        )],
    )
}

/// Check that every admitted-to-admitted interval pair contains the true
/// transition probability at epoch `t` (the auxiliary rows are pinned by
/// construction, so only real triples can fail).
pub fn improved_set_covers(
    stats: &crate::reachability::VisitStats,
    space: &PrunedSpace,
    mdp: &LayeredMdp,
    t: usize,
    delta: f64,
) -> bool {
    let actions = mdp.num_actions();
    for h in 0..mdp.horizon() {
        let sources: Vec<State> = if h == 0 {
            vec![State::new(0, 0)]
        } else {
            space.admitted(h).iter().map(|&i| State::new(h, i)).collect()
        };
        for s in sources {
            for a in 0..actions {
                for &next_full in space.admitted(h + 1) {
                    let s2 = State::new(h + 1, next_full);
                    let p = mdp.prob(s, a, next_full);
                    let (Some(i_s), Some(i_s2)) =
                        (stats.arrival_index(s), stats.arrival_index(s2))
                    else {
                        continue; // intervals are [0, 1] before both arrive
                    };
                    let (delta_sa, delta_sas) = allocate_confidence(i_s, i_s2, actions, delta);
                    if !improved_interval_1(stats, s, a, s2, t, delta_sas).contains(p) {
                        return false;
                    }
                    if !improved_interval_2(stats, s, a, s2, t, delta_sa).contains(p) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Concentration
// ---------------------------------------------------------------------------

fn lemma8_suite(trials: usize) -> SuiteReport {
    let mut checks = Vec::new();
    for (i, delta) in [0.01, 0.05].into_iter().enumerate() {
        let out = lemma8_monte_carlo(
            SequenceFamily::IidBernoulli(0.3),
            delta,
            10_000,
            trials,
            7_000 + i as u64,
        );
        let tol = out.tolerance(delta);
        checks.push(CheckResult::at_most(
            &format!("upper bound violation rate (delta = {delta})"),
            out.upper_violation_rate,
            delta + tol,
            format!("{trials} Bernoulli(0.3) sequences of length 10000"),
        ));
        checks.push(CheckResult::at_most(
            &format!("lower bound violation rate (delta = {delta})"),
            out.lower_violation_rate,
            delta + tol,
            format!("{trials} Bernoulli(0.3) sequences of length 10000"),
        ));
    }
    SuiteReport::new("lemma8-mc", checks)
}
