//! Cross-module statistical and structural properties exercised on seeded
//! runs: everything that needs a driver loop rather than a single module.

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use statefree::confidence::{allocate_confidence, improved_interval_1, improved_interval_2};
use statefree::driver::{run, SfRl, SfRlConfig};
use statefree::env::{generate_env, EnvFamilySpec, LossGenSpec};
use statefree::learners::{
    BonusRule, EpisodicLearner, LearnerConfig, RestartContext, Ucbvi, UcbviConfig,
};
use statefree::mdp::{
    best_in_hindsight, compute_occupancy, expected_loss, sample_trajectory, LayeredMdp, LossModel,
    Policy, SaTable, SpaceShape, State,
};

fn small_env(seed: u64) -> statefree::env::GeneratedEnv {
    generate_env(&EnvFamilySpec {
        horizon: 2,
        reachable_per_layer: vec![2, 2],
        padded_per_layer: vec![],
        num_actions: 2,
        seed,
        loss: LossGenSpec::StochasticUniform { lo: 0.1, hi: 0.9 },
    })
    .unwrap()
}

/// Every state is visited while unadmitted at most
/// `2 eps T + 2 ln(2 H^2 T^2 / delta) + 2` times.
#[test]
fn stopping_visit_bound_holds_on_run_logs() {
    let shape = SpaceShape::new(vec![1, 3, 1, 1], 1).unwrap();
    // Layer-1 reach probabilities straddling eps = 0.05.
    let rows = vec![
        vec![vec![vec![0.77, 0.20, 0.03]]],
        vec![vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]]],
        vec![vec![vec![1.0]]],
    ];
    let mdp = LayeredMdp::new(shape.clone(), rows).unwrap();
    let mut means = SaTable::zeros(&shape);
    means.set(State::new(1, 0), 0, 0.4);
    means.set(State::new(2, 0), 0, 0.6);
    let loss = LossModel::Stochastic(means);
    let episodes = 3000;
    let (delta, eps) = (0.1, 0.05);
    for seed in 0..20u64 {
        let mut cfg =
            SfRlConfig::new(delta, eps, episodes, LearnerConfig::Ucbvi { bonus_constant: 1.0 });
        cfg.record_trajectories = true;
        cfg.track_expected = false;
        let log = run(cfg, &mdp, &loss, 700 + seed).unwrap();
        let trajectories = log.trajectories.as_ref().unwrap();
        let h = mdp.horizon() as f64;
        let t_f = episodes as f64;
        let bound = 2.0 * eps * t_f + 2.0 * (2.0 * h * h * t_f * t_f / delta).ln() + 2.0;
        for layer in 1..=mdp.horizon() {
            for s in 0..mdp.layer_size(layer) {
                let state = State::new(layer, s);
                let admitted_at = log
                    .admissions
                    .iter()
                    .find(|(_, st)| *st == state)
                    .map(|(t, _)| *t)
                    .unwrap_or(usize::MAX);
                let unadmitted_visits = trajectories
                    .iter()
                    .enumerate()
                    .filter(|(i, traj)| i + 1 < admitted_at && traj.state_at(layer) == state)
                    .count() as f64;
                assert!(
                    unadmitted_visits <= bound,
                    "seed {seed}: state ({layer},{s}) visited {unadmitted_visits} times \
                     while unadmitted, bound {bound}"
                );
            }
        }
    }
}

/// While admitted sets only grow, each restart must admit at least one new
/// state, and the learner's trajectories stay inside the space it was given.
#[test]
fn restarts_are_bounded_and_trajectories_stay_in_space() {
    let env = small_env(41);
    let mut cfg =
        SfRlConfig::new(0.1, 0.0, 1200, LearnerConfig::Ucbvi { bonus_constant: 1.0 });
    cfg.record_trajectories = true;
    cfg.track_expected = false;
    let log = run(cfg, &env.mdp, &env.loss, 99).unwrap();
    let admitted_count = log.admissions.len();
    assert!(log.restarts.len() <= admitted_count + 1);

    // Reconstruct per-layer admitted counts over time and audit the pruned
    // trajectories against them.
    let pruned = log.pruned_trajectories.as_ref().unwrap();
    let horizon = env.mdp.horizon();
    let mut admitted_by_layer = vec![0usize; horizon + 1];
    let mut admission_iter = log.admissions.iter().peekable();
    for (i, traj) in pruned.iter().enumerate() {
        let t = i + 1;
        while let Some((at, s)) = admission_iter.peek() {
            if *at <= t {
                admitted_by_layer[s.layer] += 1;
                admission_iter.next();
            } else {
                break;
            }
        }
        for (j, step) in traj.steps.iter().enumerate() {
            let layer = j + 1;
            // Pruned indices run over admitted states plus one auxiliary.
            assert!(
                step.state <= admitted_by_layer[layer],
                "episode {t}: step {layer} index {} exceeds layer size {}",
                step.state,
                admitted_by_layer[layer] + 1
            );
        }
    }
}

/// Optimism of the value-iteration learner: the greedy start value
/// under-estimates the optimal expected loss in all epochs, for at least a
/// `1 - delta` fraction of runs.
#[test]
fn ucbvi_start_values_stay_optimistic() {
    let env = small_env(13);
    let (_, opt) = best_in_hindsight(&env.mdp, {
        let LossModel::Stochastic(means) = &env.loss else { panic!() };
        means
    })
    .unwrap();
    let delta = 0.1;
    let runs = 300;
    let episodes = 400;
    let mut violating_runs = 0;
    for seed in 0..runs as u64 {
        let mut learner = Ucbvi::new(
            UcbviConfig { bonus: BonusRule::Standard { c: 0.3 } },
            RestartContext {
                shape: env.mdp.shape().clone(),
                delta,
                total_episodes: episodes,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
        let mut violated = false;
        for t in 1..=episodes {
            if learner.start_value() > opt + 1e-9 {
                violated = true;
                break;
            }
            let policy = learner.propose_policy(t);
            let o = sample_trajectory(&env.mdp, &policy, &env.loss, t, &mut rng).unwrap();
            learner.observe(&o, t).unwrap();
        }
        violating_runs += violated as usize;
    }
    let rate = violating_runs as f64 / runs as f64;
    let tol = 3.0 * (delta * (1.0 - delta) / runs as f64).sqrt();
    assert!(rate <= delta + tol, "optimism violated in {violating_runs}/{runs} runs");
}

/// Interval widths for a fixed triple shrink as its counts grow; checked on
/// a deterministic-transition fixture where the empirical mean cannot
/// wander (stochastic means make the width fluctuate with the estimate).
#[test]
fn improved_intervals_shrink_with_counts() {
    // Actions deterministically select the layer-1 successor.
    let shape = SpaceShape::new(vec![1, 2, 1, 1], 2).unwrap();
    let rows = vec![
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]],
        vec![vec![vec![1.0], vec![1.0]]],
    ];
    let mdp = LayeredMdp::new(shape.clone(), rows).unwrap();
    let mut means = SaTable::zeros(&shape);
    means.set(State::new(1, 0), 0, 0.3);
    means.set(State::new(1, 1), 0, 0.7);
    let loss = LossModel::Stochastic(means);
    let delta = 0.1;
    let mut cfg = SfRlConfig::new(delta, 0.0, 2500, LearnerConfig::Ucbvi { bonus_constant: 1.0 });
    cfg.track_expected = false;
    let mut driver = SfRl::new(cfg, &mdp, &loss, 5).unwrap();
    let s0 = State::new(0, 0);
    let target = State::new(1, 0);
    let mut last: Option<(u64, f64)> = None;
    for t in 1..=2500 {
        driver.step().unwrap();
        let stats = driver.stats();
        let n = stats.pair_count(s0, 0);
        let (Some(i_s), Some(i_s2)) = (stats.arrival_index(s0), stats.arrival_index(target))
        else {
            continue;
        };
        let (d_sa, d_sas) = allocate_confidence(i_s, i_s2, 2, delta);
        let i1 = improved_interval_1(stats, s0, 0, target, t + 1, d_sas);
        let i2 = improved_interval_2(stats, s0, 0, target, t + 1, d_sa);
        let (iv, _) = i1.intersect_or_hull(&i2);
        if let Some((last_n, last_width)) = last {
            if n > last_n {
                assert!(
                    iv.width() <= last_width + 1e-12,
                    "width grew from {last_width} to {} as counts rose {last_n} -> {n} (t = {t})",
                    iv.width()
                );
                last = Some((n, iv.width()));
            }
        } else if n > 0 {
            last = Some((n, iv.width()));
        }
    }
    let (final_n, final_width) = last.unwrap();
    assert!(final_n > 500, "fixture should visit the pair often, got {final_n}");
    assert!(final_width < 1.0, "width should leave the clamp, got {final_width}");
}

/// Width domination: the intersected interval is within a constant of the
/// classical Bernstein profile. The constant is fitted on one seeded run and
/// must transfer to fresh runs with 25% headroom.
#[test]
fn improved_width_dominated_by_bernstein_profile() {
    let env = small_env(23);
    let delta = 0.1;
    let episodes = 2000;
    let fit = width_ratio_extremum(&env, delta, episodes, 1);
    assert!(fit.is_finite() && fit > 0.0);
    assert!(fit < 100.0, "fitted constant suspiciously large: {fit}");
    for seed in [2, 3] {
        let check = width_ratio_extremum(&env, delta, episodes, seed);
        assert!(
            check <= fit * 1.25,
            "seed {seed}: width ratio {check} exceeds fitted constant {fit} with headroom"
        );
    }
}

fn width_ratio_extremum(
    env: &statefree::env::GeneratedEnv,
    delta: f64,
    episodes: usize,
    seed: u64,
) -> f64 {
    let mut cfg =
        SfRlConfig::new(delta, 0.0, episodes, LearnerConfig::Ucbvi { bonus_constant: 1.0 });
    cfg.track_expected = false;
    let mut driver = SfRl::new(cfg, &env.mdp, &env.loss, 60_000 + seed).unwrap();
    let actions = env.mdp.num_actions();
    let horizon = env.mdp.horizon();
    let episodes_total = episodes as f64;
    let mut worst: f64 = 0.0;
    for t in 1..=episodes {
        driver.step().unwrap();
        if t % 50 != 0 {
            continue;
        }
        let stats = driver.stats();
        let space = driver.space();
        let visited = stats.distinct_visited() as f64;
        let l = (visited * actions as f64 * episodes_total / delta).ln();
        for h in 0..horizon {
            let sources: Vec<State> = if h == 0 {
                vec![State::new(0, 0)]
            } else {
                space.admitted(h).iter().map(|&i| State::new(h, i)).collect()
            };
            for s in sources {
                for a in 0..actions {
                    for &nf in space.admitted(h + 1) {
                        let s2 = State::new(h + 1, nf);
                        let (Some(i_s), Some(i_s2)) =
                            (stats.arrival_index(s), stats.arrival_index(s2))
                        else {
                            continue;
                        };
                        let (d_sa, d_sas) = allocate_confidence(i_s, i_s2, actions, delta);
                        let i1 = improved_interval_1(stats, s, a, s2, t, d_sas);
                        let i2 = improved_interval_2(stats, s, a, s2, t, d_sa);
                        let (iv, _) = i1.intersect_or_hull(&i2);
                        let n = stats.pair_count(s, a).max(1) as f64;
                        let p = env.mdp.prob(s, a, nf);
                        let profile = (p * l / n).sqrt() + (visited + l) / n;
                        worst = worst.max(iv.width() / profile);
                    }
                }
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Property-based invariants
// ---------------------------------------------------------------------------

fn arb_row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, n).prop_map(|mut v| {
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|p| *p /= s);
        v
    })
}

fn arb_mdp_and_policy() -> impl Strategy<Value = (LayeredMdp, Policy)> {
    (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(n1, n2, actions)| {
        let sizes = vec![1, n1, n2, 1];
        let shape = SpaceShape::new(sizes.clone(), actions).unwrap();
        let row_strategies: Vec<_> = (0..=2)
            .map(|h| {
                proptest::collection::vec(
                    proptest::collection::vec(arb_row(sizes[h + 1]), actions),
                    sizes[h],
                )
            })
            .collect();
        let policy_strategy: Vec<_> =
            (0..=2).map(|h| proptest::collection::vec(arb_row(actions), sizes[h])).collect();
        (row_strategies, policy_strategy).prop_map(move |(rows, pol)| {
            (LayeredMdp::new(shape.clone(), rows).unwrap(), Policy::new(pol).unwrap())
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Exact occupancies are normalized per layer and price losses inside
    /// [0, H].
    #[test]
    fn occupancy_is_normalized((mdp, policy) in arb_mdp_and_policy()) {
        let q = compute_occupancy(&mdp, &policy).unwrap();
        let shape = mdp.shape();
        for h in 1..=shape.horizon() {
            let mass: f64 = (0..shape.layer_sizes[h])
                .flat_map(|s| (0..shape.num_actions).map(move |a| (s, a)))
                .map(|(s, a)| q.get(State::new(h, s), a))
                .sum();
            prop_assert!((mass - 1.0).abs() < 1e-10);
        }
        let ones = SaTable::constant(shape, 1.0);
        let v = expected_loss(&q, &ones).unwrap();
        prop_assert!(v >= -1e-12 && v <= shape.horizon() as f64 + 1e-12);
    }

    /// Pruning a trajectory never increases its realized loss, and the
    /// rewrite is idempotent.
    #[test]
    fn pruning_is_lossless_only_inside_the_space(
        (mdp, policy) in arb_mdp_and_policy(),
        admit_mask in proptest::collection::vec(any::<bool>(), 6),
        seed in any::<u64>(),
    ) {
        use statefree::pruned::{prune_trajectory, PrunedSpace};
        let mut space = PrunedSpace::new(mdp.horizon(), mdp.num_actions());
        let mut idx = 0;
        let mut to_admit = Vec::new();
        for h in 1..=mdp.horizon() {
            for s in 0..mdp.layer_size(h) {
                if admit_mask[idx % admit_mask.len()] {
                    to_admit.push(State::new(h, s));
                }
                idx += 1;
            }
        }
        space.admit(&to_admit);
        let loss = LossModel::Stochastic(SaTable::constant(mdp.shape(), 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = sample_trajectory(&mdp, &policy, &loss, 1, &mut rng).unwrap();
        let pruned = prune_trajectory(&o, &space);
        prop_assert!(pruned.total_loss() <= o.total_loss() + 1e-12);
        // Idempotent under the identity mapping of already-pruned content:
        // auxiliary suffix stays auxiliary.
        let mut inside = true;
        for (i, step) in pruned.steps.iter().enumerate() {
            let h = i + 1;
            let is_aux = step.state == space.aux_index(h);
            if !inside {
                prop_assert!(is_aux && step.loss == 0.0);
            }
            if is_aux {
                inside = false;
            }
        }
    }

    /// The admission margin is monotone in the visit count and the test
    /// never fires for unvisited states.
    #[test]
    fn admission_margin_is_monotone(
        t in 1usize..5000,
        delta in 0.01f64..0.5,
        eps in 0.0f64..0.3,
        horizon in 1usize..6,
    ) {
        use statefree::reachability::admission_margin;
        let mut prev = f64::NEG_INFINITY;
        for n in 0..=(t as u64) {
            let m = admission_margin(n, t, delta, eps, horizon, 0.5);
            prop_assert!(m >= prev);
            prev = m;
        }
        prop_assert!(admission_margin(0, t, delta, eps, horizon, 0.5) < 0.0);
    }

    /// Interval intersection keeps common points; the hull fallback keeps
    /// the union's extremes.
    #[test]
    fn interval_intersection_is_sound(
        a_lo in 0.0f64..1.0, a_w in 0.0f64..1.0,
        b_lo in 0.0f64..1.0, b_w in 0.0f64..1.0,
        p in 0.0f64..1.0,
    ) {
        use statefree::confidence::Interval;
        let a = Interval::clamped(a_lo, a_lo + a_w);
        let b = Interval::clamped(b_lo, b_lo + b_w);
        let (iv, fell_back) = a.intersect_or_hull(&b);
        if a.contains(p) && b.contains(p) {
            prop_assert!(!fell_back);
            prop_assert!(iv.contains(p));
        }
        if fell_back {
            prop_assert!(iv.contains(a.lo) && iv.contains(b.hi.min(iv.hi)));
        }
    }
}
