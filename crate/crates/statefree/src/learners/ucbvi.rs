//! Optimistic value iteration over empirical transitions, in loss form.
//!
//! Each episode the learner runs backward value iteration on its empirical
//! model with an exploration bonus subtracted from the cost:
//!
//! ```text
//! Q(s, a) = clamp( c_hat(s, a) + <P_bar(.|s, a), V> - b(s, a), 0, H )
//! V(s)    = min_a Q(s, a)
//! ```
//!
//! and plays the greedy (lowest-index tie-break) policy. Two bonus rules are
//! available:
//!
//! - the classical one, `b = c H L sqrt(1 / N)` with
//!   `L = ln(|S| |A| T / delta)` — its union bound runs over the whole state
//!   space, so it inherits a `ln |S|` factor;
//! - the arrival-allocated one, `b = c H L sqrt(1 / max(N - 1, 1))` with
//!   `L = ln(2 i(s)^2 |A| T / delta)`, where `i(s)` is the state's arrival
//!   rank. Confidence is only ever spent on discovered states, so the bonus
//!   is literally independent of how many undiscovered states exist. One
//!   count is forfeited because the confidence level is fixed by the first
//!   visit.
//!
//! Unvisited pairs get the maximal bonus `H`, which pins their `Q` to zero
//! and keeps the values optimistic before the first sample.

use crate::error::Result;
use crate::mdp::{Policy, SpaceShape, State, Trajectory};

use super::{EpisodicLearner, RestartContext};

/// Which exploration bonus to use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BonusRule {
    Standard { c: f64 },
    ArrivalAllocated { c: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct UcbviConfig {
    pub bonus: BonusRule,
}

/// Classical bonus: `c H L sqrt(1 / N)` capped at `H`, with
/// `L = ln(|S| |A| T / delta)`; `H` outright when the pair is unvisited.
pub fn bonus_standard(
    n: u64,
    state_count: usize,
    action_count: usize,
    total_episodes: usize,
    delta: f64,
    horizon: usize,
    c: f64,
) -> f64 {
    let h = horizon as f64;
    if n == 0 {
        return h;
    }
    let l = (state_count as f64 * action_count as f64 * total_episodes as f64 / delta).ln();
    (c * h * l * (1.0 / n as f64).sqrt()).min(h)
}

/// Arrival-allocated bonus: `c H L sqrt(1 / max(N - 1, 1))` capped at `H`,
/// with `L = ln(2 i(s)^2 |A| T / delta)`; `H` before the state's first visit.
pub fn bonus_arrival(
    n: u64,
    arrival_index: Option<usize>,
    action_count: usize,
    total_episodes: usize,
    delta: f64,
    horizon: usize,
    c: f64,
) -> f64 {
    let h = horizon as f64;
    let Some(i) = arrival_index else {
        return h;
    };
    if n == 0 {
        return h;
    }
    let i = i as f64;
    let l = (2.0 * i * i * action_count as f64 * total_episodes as f64 / delta).ln();
    let denom = (n.saturating_sub(1)).max(1) as f64;
    (c * h * l * (1.0 / denom).sqrt()).min(h)
}

/// Optimistic value-iteration learner.
pub struct Ucbvi {
    cfg: UcbviConfig,
    shape: SpaceShape,
    delta: f64,
    total_episodes: usize,
    /// Visit counts per `(h, s, a)`, `h = 0..=H`.
    n: Vec<Vec<Vec<u64>>>,
    /// Successor counts per `(h, s, a, s')`.
    m: Vec<Vec<Vec<Vec<u64>>>>,
    /// Accumulated realized losses per `(h, s, a)`.
    loss_sum: Vec<Vec<Vec<f64>>>,
    /// Arrival rank per `(h, s)`; assigned on first visit, layer-then-index
    /// order within an episode.
    arrival: Vec<Vec<Option<usize>>>,
    arrivals_seen: usize,
}

impl Ucbvi {
    pub fn new(cfg: UcbviConfig, ctx: RestartContext) -> Self {
        let mut learner = Self {
            cfg,
            shape: SpaceShape { layer_sizes: vec![1, 1, 1], num_actions: 1 },
            delta: 0.1,
            total_episodes: 1,
            n: Vec::new(),
            m: Vec::new(),
            loss_sum: Vec::new(),
            arrival: Vec::new(),
            arrivals_seen: 0,
        };
        learner.reset(ctx);
        learner
    }

    fn reset(&mut self, ctx: RestartContext) {
        let shape = ctx.shape;
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
        self.loss_sum = (0..=horizon)
            .map(|h| vec![vec![0.0; shape.num_actions]; shape.layer_sizes[h]])
            .collect();
        self.arrival = (0..=horizon).map(|h| vec![None; shape.layer_sizes[h]]).collect();
        self.arrivals_seen = 0;
        self.delta = ctx.delta;
        self.total_episodes = ctx.total_episodes;
        self.shape = shape;
    }

    fn bonus(&self, s: State, a: usize) -> f64 {
        match self.cfg.bonus {
            BonusRule::Standard { c } => bonus_standard(
                self.n[s.layer][s.index][a],
                self.shape.interior_state_count(),
                self.shape.num_actions,
                self.total_episodes,
                self.delta,
                self.shape.horizon(),
                c,
            ),
            BonusRule::ArrivalAllocated { c } => bonus_arrival(
                self.n[s.layer][s.index][a],
                self.arrival[s.layer][s.index],
                self.shape.num_actions,
                self.total_episodes,
                self.delta,
                self.shape.horizon(),
                c,
            ),
        }
    }

    /// Backward value iteration; returns per-layer Q tables, per-layer V
    /// tables, and the greedy policy.
    pub fn value_iteration(&self) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Policy) {
        let horizon = self.shape.horizon();
        let h_f = horizon as f64;
        let mut q_tables: Vec<Vec<Vec<f64>>> = vec![Vec::new(); horizon + 1];
        let mut v_tables: Vec<Vec<f64>> = vec![Vec::new(); horizon + 2];
        v_tables[horizon + 1] = vec![0.0];
        let mut actions: Vec<Vec<usize>> = vec![Vec::new(); horizon + 1];
        for h in (0..=horizon).rev() {
            let size = self.shape.layer_sizes[h];
            let mut q_layer = vec![vec![0.0; self.shape.num_actions]; size];
            let mut v_layer = vec![0.0; size];
            let mut a_layer = vec![0; size];
            for s in 0..size {
                let state = State::new(h, s);
                let mut best = f64::INFINITY;
                let mut best_a = 0;
                for a in 0..self.shape.num_actions {
                    let n = self.n[h][s][a];
                    let c_hat = if n > 0 { self.loss_sum[h][s][a] / n as f64 } else { 0.0 };
                    let cont = if n > 0 {
                        self.m[h][s][a]
                            .iter()
                            .zip(v_tables[h + 1].iter())
                            .map(|(&cnt, &v)| (cnt as f64 / n as f64) * v)
                            .sum::<f64>()
                    } else {
                        // No data: the bonus already forces full optimism.
                        v_tables[h + 1].iter().sum::<f64>() / v_tables[h + 1].len() as f64
                    };
                    let q = (c_hat + cont - self.bonus(state, a)).clamp(0.0, h_f);
                    q_layer[s][a] = q;
                    if q < best {
                        best = q;
                        best_a = a;
                    }
                }
                v_layer[s] = best;
                a_layer[s] = best_a;
            }
            q_tables[h] = q_layer;
            v_tables[h] = v_layer;
            actions[h] = a_layer;
        }
        let policy = Policy::deterministic(&self.shape, &actions);
        (q_tables, v_tables.into_iter().take(horizon + 1).collect(), policy)
    }

    /// Optimistic value at the start state.
    pub fn start_value(&self) -> f64 {
        let (_, v, _) = self.value_iteration();
        v[0][0]
    }

    pub fn visit_count(&self, s: State, a: usize) -> u64 {
        self.n[s.layer][s.index][a]
    }

    /// The exploration bonus the learner would apply to `(s, a)` right now.
    pub fn exploration_bonus(&self, s: State, a: usize) -> f64 {
        self.bonus(s, a)
    }

    pub fn arrival_index_of(&self, s: State) -> Option<usize> {
        self.arrival[s.layer][s.index]
    }
}

impl EpisodicLearner for Ucbvi {
    fn propose_policy(&mut self, _t: usize) -> Policy {
        self.value_iteration().2
    }

    fn observe(&mut self, trajectory: &Trajectory, _t: usize) -> Result<()> {
        // Arrival ranks: new states of this episode, layer order first.
        let mut visited = vec![State::new(0, 0)];
        visited.extend((1..=trajectory.horizon()).map(|h| trajectory.state_at(h)));
        for s in &visited {
            if self.arrival[s.layer][s.index].is_none() {
                self.arrivals_seen += 1;
                self.arrival[s.layer][s.index] = Some(self.arrivals_seen);
            }
        }
        // Counts, including the start step (whose loss is structurally 0).
        let mut prev = (State::new(0, 0), trajectory.start_action);
        self.n[0][0][trajectory.start_action] += 1;
        for step in &trajectory.steps {
            let s = State::new(prev.0.layer + 1, step.state);
            self.m[prev.0.layer][prev.0.index][prev.1][step.state] += 1;
            self.n[s.layer][s.index][step.action] += 1;
            self.loss_sum[s.layer][s.index][step.action] += step.loss;
            prev = (s, step.action);
        }
        // The final transition into the unique terminal state.
        self.m[prev.0.layer][prev.0.index][prev.1][0] += 1;
        Ok(())
    }

    fn restart(&mut self, ctx: RestartContext) -> Result<()> {
        self.reset(ctx);
        Ok(())
    }

    fn shape(&self) -> &SpaceShape {
        &self.shape
    }
}
