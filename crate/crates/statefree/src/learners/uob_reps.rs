//! Occupancy-measure online mirror descent with implicit exploration.
//!
//! The learner maintains an occupancy iterate over transition triples. Each
//! episode it plays the policy extracted from the iterate, forms the
//! importance-weighted loss estimate
//!
//! ```text
//! l_hat(s, a) = l(s, a) / (u(s, a) + gamma) * 1{(s, a) visited}
//! ```
//!
//! where `u(s, a)` is the largest occupancy any transition in the current
//! confidence set could give `(s, a)` (the implicit-exploration term `gamma`
//! biases the estimate low to control its variance), then takes an entropic
//! mirror-descent step followed by a KL projection back onto the occupancy
//! polytope of the freshest confidence set.
//!
//! Learning and exploration rates are adaptive,
//! `eta_k = gamma_k = sqrt(H ln(H |S| |A| / delta) / (|S| |A| k))`, so no
//! horizon tuning is needed and the guarantee is anytime.
//!
//! By default the confidence set is the learner's own classical construction
//! from its counts. An injected set (built elsewhere from statistics that
//! survive restarts) replaces it entirely; on a fresh restart the iterate is
//! re-seeded inside the injected polytope, which is how previously learned
//! model information carries across state-space growth.

use crate::confidence::{build_baseline_set, TransitionConfidenceSet};
use crate::error::{Error, Result};
use crate::mdp::{Policy, SaTable, SpaceShape, State, Trajectory};

use super::polytope::{
    interior_occupancy, kl_project, upper_occupancy, OccTriples, ProjectionOptions,
    ProjectionStats, ProjectionWarmStart,
};
use super::{EpisodicLearner, RestartContext};

/// Adaptive learning/exploration rate
/// `sqrt(H ln(H |S| |A| / delta) / (|S| |A| k))`; used for both `eta_k` and
/// `gamma_k`.
pub fn adaptive_rate(
    horizon: usize,
    state_count: usize,
    action_count: usize,
    k: usize,
    delta: f64,
) -> f64 {
    let h = horizon as f64;
    let sa = state_count as f64 * action_count as f64;
    (h * (h * sa / delta).ln() / (sa * k as f64)).sqrt()
}

/// The implicit-exploration loss estimate.
pub fn loss_estimate(observed: f64, upper_occupancy: f64, gamma: f64, visited: bool) -> f64 {
    if visited {
        observed / (upper_occupancy + gamma)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UobRepsConfig {
    /// Multiplier on both adaptive rates.
    pub rate_scale: f64,
    pub projection: ProjectionOptions,
}

impl Default for UobRepsConfig {
    fn default() -> Self {
        Self { rate_scale: 1.0, projection: ProjectionOptions::default() }
    }
}

pub struct UobReps {
    cfg: UobRepsConfig,
    shape: SpaceShape,
    delta: f64,
    total_episodes: usize,
    /// Episodes observed since the last restart (the `k` of the rates).
    episodes_in_run: usize,
    n: Vec<Vec<Vec<u64>>>,
    m: Vec<Vec<Vec<Vec<u64>>>>,
    q_hat: OccTriples,
    current_policy: Policy,
    /// Set used for upper occupancy bounds this epoch.
    set_for_estimates: TransitionConfidenceSet,
    /// Injected set awaiting use in the next projection, if any.
    pending_injection: Option<TransitionConfidenceSet>,
    warm: ProjectionWarmStart,
    last_projection: ProjectionStats,
}

impl UobReps {
    pub fn new(cfg: UobRepsConfig, ctx: RestartContext) -> Result<Self> {
        let shape = ctx.shape.clone();
        let set = Self::internal_set_for(
            &shape,
            &vec![],
            &vec![],
            ctx.total_episodes,
            ctx.delta,
        );
        let q_hat = interior_occupancy(&set)?;
        let current_policy = q_hat.policy();
        let mut learner = Self {
            cfg,
            shape: shape.clone(),
            delta: ctx.delta,
            total_episodes: ctx.total_episodes,
            episodes_in_run: 0,
            n: Vec::new(),
            m: Vec::new(),
            q_hat,
            current_policy,
            set_for_estimates: set,
            pending_injection: None,
            warm: ProjectionWarmStart::default(),
            last_projection: ProjectionStats::default(),
        };
        learner.alloc_counts();
        Ok(learner)
    }

    fn alloc_counts(&mut self) {
        let shape = &self.shape;
        let horizon = shape.horizon();
        self.n = (0..=horizon)
            .map(|h| vec![vec![0; shape.num_actions]; shape.layer_sizes[h]])
            .collect();
        self.m = (0..=horizon)
            .map(|h| {
                vec![
                    vec![vec![0; shape.layer_sizes[h + 1]]; shape.num_actions];
                    shape.layer_sizes[h]
                ]
            })
            .collect();
    }

    fn internal_set_for(
        shape: &SpaceShape,
        n: &Vec<Vec<Vec<u64>>>,
        m: &Vec<Vec<Vec<Vec<u64>>>>,
        total_episodes: usize,
        delta: f64,
    ) -> TransitionConfidenceSet {
        let pair = |s: State, a: usize| -> u64 {
            n.get(s.layer).map(|l| l[s.index][a]).unwrap_or(0)
        };
        let triple = |s: State, a: usize, s2: usize| -> u64 {
            m.get(s.layer).map(|l| l[s.index][a][s2]).unwrap_or(0)
        };
        build_baseline_set(shape, &pair, &triple, total_episodes, delta)
    }

    fn internal_set(&self) -> TransitionConfidenceSet {
        Self::internal_set_for(&self.shape, &self.n, &self.m, self.total_episodes, self.delta)
    }

    /// The rates `(eta_k, gamma_k)` the learner will use at its `k`-th
    /// post-restart episode.
    pub fn rates(&self, k: usize) -> f64 {
        self.cfg.rate_scale
            * adaptive_rate(
                self.shape.horizon(),
                self.shape.interior_state_count(),
                self.shape.num_actions,
                k.max(1),
                self.delta,
            )
    }

    pub fn iterate(&self) -> &OccTriples {
        &self.q_hat
    }

    pub fn estimate_set(&self) -> &TransitionConfidenceSet {
        &self.set_for_estimates
    }

    pub fn last_projection_stats(&self) -> ProjectionStats {
        self.last_projection
    }
}

impl EpisodicLearner for UobReps {
    fn propose_policy(&mut self, _t: usize) -> Policy {
        self.current_policy.clone()
    }

    fn observe(&mut self, trajectory: &Trajectory, _t: usize) -> Result<()> {
        self.episodes_in_run += 1;
        let rate = self.rates(self.episodes_in_run);
        let (eta, gamma) = (rate, rate);

        // Loss estimates for the visited pairs, using this epoch's set.
        let mut l_hat = SaTable::zeros(&self.shape);
        for h in 1..=trajectory.horizon() {
            let step = trajectory.steps[h - 1];
            if step.loss == 0.0 {
                continue;
            }
            let s = State::new(h, step.state);
            let u = upper_occupancy(&self.set_for_estimates, &self.current_policy, s, step.action)?;
            l_hat.set(s, step.action, loss_estimate(step.loss, u, gamma, true));
        }

        // Counts, including the start step.
        let mut prev = (State::new(0, 0), trajectory.start_action);
        self.n[0][0][trajectory.start_action] += 1;
        for step in &trajectory.steps {
            let s = State::new(prev.0.layer + 1, step.state);
            self.m[prev.0.layer][prev.0.index][prev.1][step.state] += 1;
            self.n[s.layer][s.index][step.action] += 1;
            prev = (s, step.action);
        }
        self.m[prev.0.layer][prev.0.index][prev.1][0] += 1;

        // Mirror step: multiplicative weights on the triples (the estimate
        // lifts uniformly over successors, leaving <q, l_hat> unchanged),
        // then the KL projection into the freshest polytope.
        let next_set = match self.pending_injection.clone() {
            Some(set) => set,
            None => self.internal_set(),
        };
        let mut weights = self.q_hat.clone();
        for h in 1..=self.shape.horizon() {
            for s in 0..self.shape.layer_sizes[h] {
                let state = State::new(h, s);
                for a in 0..self.shape.num_actions {
                    let le = l_hat.get(state, a);
                    if le != 0.0 {
                        let factor = (-eta * le).exp();
                        for s2 in 0..self.shape.layer_sizes[h + 1] {
                            weights.set(state, a, s2, weights.get(state, a, s2) * factor);
                        }
                    }
                }
            }
        }
        let mut stats = ProjectionStats::default();
        self.q_hat = kl_project(&weights, &next_set, &self.cfg.projection, &mut self.warm, &mut stats)?;
        self.last_projection = stats;
        self.current_policy = self.q_hat.policy();
        if self.pending_injection.is_none() {
            self.set_for_estimates = next_set;
        }
        Ok(())
    }

    fn restart(&mut self, ctx: RestartContext) -> Result<()> {
        self.shape = ctx.shape.clone();
        self.delta = ctx.delta;
        self.total_episodes = ctx.total_episodes;
        self.episodes_in_run = 0;
        self.pending_injection = None;
        self.warm = ProjectionWarmStart::default();
        self.alloc_counts();
        let set = self.internal_set();
        self.q_hat = interior_occupancy(&set)?;
        self.current_policy = self.q_hat.policy();
        self.set_for_estimates = set;
        Ok(())
    }

    fn inject_confidence_set(&mut self, set: TransitionConfidenceSet) -> Result<()> {
        if set.shape() != &self.shape {
            return Err(Error::Config(
                "injected confidence set does not match the learner's shape".into(),
            ));
        }
        set.check_feasible()?;
        if self.episodes_in_run == 0 {
            // Fresh restart: seed the iterate inside the injected polytope so
            // the carried-over model information takes effect immediately.
            self.q_hat = interior_occupancy(&set)?;
            self.current_policy = self.q_hat.policy();
            self.warm = ProjectionWarmStart::default();
        }
        self.set_for_estimates = set.clone();
        self.pending_injection = Some(set);
        Ok(())
    }

    fn supports_injection(&self) -> bool {
        true
    }

    fn shape(&self) -> &SpaceShape {
        &self.shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{sample_trajectory, LayeredMdp, LossModel, Step};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(sizes: Vec<usize>, actions: usize, t: usize) -> RestartContext {
        RestartContext {
            shape: SpaceShape::new(sizes, actions).unwrap(),
            delta: 0.1,
            total_episodes: t,
        }
    }

    #[test]
    fn adaptive_rate_hand_value_and_scaling() {
        // H = 2, |S| = 4, |A| = 2, delta = 0.1, k = 1.
        let r1 = adaptive_rate(2, 4, 2, 1, 0.1);
        let expected = (2.0 * 160.0f64.ln() / 8.0).sqrt();
        assert!((r1 - expected).abs() < 1e-12);
        assert!((r1 - 1.126_407).abs() < 1e-5);
        // Quadrupling k halves the rate.
        let r4 = adaptive_rate(2, 4, 2, 4, 0.1);
        assert!((r4 - r1 / 2.0).abs() < 1e-12);
        // Positive and decreasing.
        let mut prev = f64::INFINITY;
        for k in 1..50 {
            let r = adaptive_rate(3, 5, 2, k, 0.05);
            assert!(r > 0.0 && r < prev);
            prev = r;
        }
    }

    #[test]
    fn loss_estimate_cases() {
        assert_eq!(loss_estimate(0.7, 0.3, 0.1, false), 0.0);
        assert!((loss_estimate(0.5, 0.2, 0.05, true) - 2.0).abs() < 1e-15);
        assert!(loss_estimate(1.0, 0.5, 1e12, true) < 1e-11);
    }

    #[test]
    fn zero_losses_leave_the_iterate_fixed() {
        let mut learner = UobReps::new(UobRepsConfig::default(), ctx(vec![1, 2, 2, 1], 2, 100)).unwrap();
        // Inject a fixed wide set so the polytope does not move between
        // episodes.
        let set = learner.internal_set();
        learner.inject_confidence_set(set).unwrap();
        let before = learner.iterate().clone();
        let traj = Trajectory {
            start_action: 0,
            steps: vec![Step { state: 1, action: 0, loss: 0.0 }, Step { state: 0, action: 1, loss: 0.0 }],
        };
        learner.observe(&traj, 1).unwrap();
        let after = learner.iterate();
        let shape = learner.shape().clone();
        for h in 0..=shape.horizon() {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..shape.num_actions {
                    for s2 in 0..shape.layer_sizes[h + 1] {
                        let state = State::new(h, s);
                        assert!(
                            (before.get(state, a, s2) - after.get(state, a, s2)).abs() < 1e-7,
                            "zero-loss episode moved the iterate"
                        );
                    }
                }
            }
        }
        // The policy stays symmetric across actions (the start was uniform
        // and nothing broke the tie).
        let pi = learner.propose_policy(2);
        for h in 0..=shape.horizon() {
            for s in 0..shape.layer_sizes[h] {
                let row = pi.row(State::new(h, s));
                assert!((row[0] - row[1]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn iterate_stays_feasible_under_random_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let shape = SpaceShape::new(vec![1, 2, 2, 1], 2).unwrap();
        let rows = (0..=shape.horizon())
            .map(|h| {
                (0..shape.layer_sizes[h])
                    .map(|_| {
                        (0..shape.num_actions)
                            .map(|_| {
                                let mut row: Vec<f64> = (0..shape.layer_sizes[h + 1])
                                    .map(|_| rng.gen::<f64>() + 0.1)
                                    .collect();
                                let s: f64 = row.iter().sum();
                                row.iter_mut().for_each(|p| *p /= s);
                                row
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mdp = LayeredMdp::new(shape.clone(), rows).unwrap();
        let mut means = SaTable::zeros(&shape);
        for h in 1..=shape.horizon() {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..shape.num_actions {
                    means.set(State::new(h, s), a, rng.gen::<f64>());
                }
            }
        }
        let loss = LossModel::Stochastic(means);
        let mut learner = UobReps::new(UobRepsConfig::default(), ctx(vec![1, 2, 2, 1], 2, 300)).unwrap();
        for t in 1..=300 {
            let policy = learner.propose_policy(t);
            let o = sample_trajectory(&mdp, &policy, &loss, t, &mut rng).unwrap();
            learner.observe(&o, t).unwrap();
            let violation = learner.iterate().feasibility_violation(learner.estimate_set());
            assert!(violation < 1e-8, "episode {t}: violation {violation}");
        }
    }

    #[test]
    fn injection_requires_matching_shape() {
        let mut learner = UobReps::new(UobRepsConfig::default(), ctx(vec![1, 2, 1], 2, 10)).unwrap();
        let other = UobReps::new(UobRepsConfig::default(), ctx(vec![1, 3, 1], 2, 10)).unwrap();
        let set = other.internal_set();
        assert!(learner.inject_confidence_set(set).is_err());
    }
}
