//! Layered tabular episodic MDPs: exact occupancy measures, expected losses,
//! trajectory sampling, and the best-in-hindsight comparator.
//!
//! The state space of a [`LayeredMdp`] is partitioned into `H + 2` layers
//! `S_0, ..., S_{H+1}` with a unique start state in layer 0 and a unique
//! terminal state in layer `H + 1`. Transitions only connect layer `h` to
//! layer `h + 1`. Losses are collected on layers `1..=H`; the start and
//! terminal layers are loss-free. An episode therefore visits exactly one
//! state per layer, and the occupancy measure
//! `q(s, a) = P(s_h = s, a_h = a | P, pi)` of a (transition, policy) pair is
//! computable exactly by one forward pass over the layers.
//!
//! States are identified by `(layer, index-within-layer)` pairs, which makes
//! the layered invariant structural: a state index is only meaningful
//! together with its layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for probability rows at construction time. Rows whose sum is
/// farther than this from 1 are rejected; rows within it are renormalized.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Tolerance for per-layer occupancy normalization.
pub const OCCUPANCY_TOL: f64 = 1e-10;

/// A state referenced by layer and index within the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub layer: usize,
    pub index: usize,
}

impl State {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

/// The shape of a layered state/action space: layer sizes for layers
/// `0..=H+1` plus the number of actions. Carries no transition knowledge, so
/// it is what a learner is told about its world at restart time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceShape {
    /// Sizes of layers `0..=H+1`; first and last must be 1.
    pub layer_sizes: Vec<usize>,
    pub num_actions: usize,
}

impl SpaceShape {
    pub fn new(layer_sizes: Vec<usize>, num_actions: usize) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::Config(format!(
                "a layered space needs at least 3 layers (start, one interior, terminal), got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes[0] != 1 || *layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config(
                "start and terminal layers must contain exactly one state".into(),
            ));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("every layer must be nonempty".into()));
        }
        if num_actions == 0 {
            return Err(Error::Config("need at least one action".into()));
        }
        Ok(Self { layer_sizes, num_actions })
    }

    /// The horizon `H`: number of loss-bearing layers.
    pub fn horizon(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    /// Number of interior states (layers `1..=H`), the `|S|` of bonus and
    /// rate formulas.
    pub fn interior_state_count(&self) -> usize {
        self.layer_sizes[1..=self.horizon()].iter().sum()
    }
}

/// A layered tabular MDP: shape plus one transition row per non-terminal
/// `(state, action)`. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayeredMdp {
    shape: SpaceShape,
    /// `rows[h][s][a]` is the distribution over layer `h + 1`, for `h = 0..=H`.
    rows: Vec<Vec<Vec<Vec<f64>>>>,
}

fn validate_row(row: &[f64], expected_len: usize, what: &str) -> Result<Vec<f64>> {
    if row.len() != expected_len {
        return Err(Error::Config(format!(
            "{what}: row has {} entries, expected {expected_len}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::Config(format!("{what}: row has negative or non-finite entries")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::Config(format!("{what}: row sums to {sum}, outside tolerance")));
    }
    Ok(row.iter().map(|&p| p / sum).collect())
}

impl LayeredMdp {
    /// Build an MDP from explicit rows. `rows[h][s][a]` must be a probability
    /// vector over layer `h + 1`. Rows within [`ROW_SUM_TOL`] of summing to 1
    /// are renormalized; anything else is rejected.
    pub fn new(shape: SpaceShape, rows: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let horizon = shape.horizon();
        if rows.len() != horizon + 1 {
            return Err(Error::Config(format!(
                "expected transition rows for layers 0..={horizon}, got {}",
                rows.len()
            )));
        }
        let mut clean = Vec::with_capacity(rows.len());
        for (h, layer_rows) in rows.into_iter().enumerate() {
            if layer_rows.len() != shape.layer_sizes[h] {
                return Err(Error::Config(format!(
                    "layer {h}: {} source states, expected {}",
                    layer_rows.len(),
                    shape.layer_sizes[h]
                )));
            }
            let mut clean_layer = Vec::with_capacity(layer_rows.len());
            for (s, state_rows) in layer_rows.into_iter().enumerate() {
                if state_rows.len() != shape.num_actions {
                    return Err(Error::Config(format!(
                        "layer {h} state {s}: {} action rows, expected {}",
                        state_rows.len(),
                        shape.num_actions
                    )));
                }
                let mut clean_state = Vec::with_capacity(state_rows.len());
                for (a, row) in state_rows.into_iter().enumerate() {
                    clean_state.push(validate_row(
                        &row,
                        shape.layer_sizes[h + 1],
                        &format!("transition layer {h} state {s} action {a}"),
                    )?);
                }
                clean_layer.push(clean_state);
            }
            clean.push(clean_layer);
        }
        Ok(Self { shape, rows: clean })
    }

    pub fn shape(&self) -> &SpaceShape {
        &self.shape
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon()
    }

    pub fn num_actions(&self) -> usize {
        self.shape.num_actions
    }

    pub fn layer_size(&self, layer: usize) -> usize {
        self.shape.layer_sizes[layer]
    }

    /// Transition row `P(. | s, a)` for a state in layer `s.layer < H + 1`.
    pub fn row(&self, s: State, action: usize) -> &[f64] {
        &self.rows[s.layer][s.index][action]
    }

    pub fn prob(&self, s: State, action: usize, next_index: usize) -> f64 {
        self.rows[s.layer][s.index][action][next_index]
    }
}

/// A stochastic tabular policy: one distribution over actions per
/// non-terminal state (layers `0..=H`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// `rows[h][s]` is a distribution over actions, for `h = 0..=H`.
    rows: Vec<Vec<Vec<f64>>>,
}

impl Policy {
    pub fn new(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (h, layer) in rows.iter().enumerate() {
            for (s, row) in layer.iter().enumerate() {
                validate_row(row, row.len(), &format!("policy layer {h} state {s}"))?;
            }
        }
        let rows = rows
            .into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|row| {
                        let sum: f64 = row.iter().sum();
                        row.into_iter().map(|p| p / sum).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { rows })
    }

    /// Uniform policy over a shape.
    pub fn uniform(shape: &SpaceShape) -> Self {
        let p = 1.0 / shape.num_actions as f64;
        let rows = (0..=shape.horizon())
            .map(|h| vec![vec![p; shape.num_actions]; shape.layer_sizes[h]])
            .collect();
        Self { rows }
    }

    /// Deterministic policy from an action table `actions[h][s]`.
    pub fn deterministic(shape: &SpaceShape, actions: &[Vec<usize>]) -> Self {
        let rows = (0..=shape.horizon())
            .map(|h| {
                (0..shape.layer_sizes[h])
                    .map(|s| {
                        let mut row = vec![0.0; shape.num_actions];
                        row[actions[h][s]] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn prob(&self, s: State, action: usize) -> f64 {
        self.rows[s.layer][s.index][action]
    }

    pub fn row(&self, s: State) -> &[f64] {
        &self.rows[s.layer][s.index]
    }

    /// Overwrite one state's action distribution. The row must already be
    /// normalized; used by space-mapping helpers.
    pub fn set_row(&mut self, s: State, row: Vec<f64>) {
        self.rows[s.layer][s.index] = row;
    }

    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn layer_len(&self, h: usize) -> usize {
        self.rows[h].len()
    }

    fn check_compatible(&self, shape: &SpaceShape) -> Result<()> {
        if self.rows.len() != shape.horizon() + 1 {
            return Err(Error::Config(format!(
                "policy covers {} layers, MDP has {}",
                self.rows.len(),
                shape.horizon() + 1
            )));
        }
        for h in 0..self.rows.len() {
            if self.rows[h].len() != shape.layer_sizes[h] {
                return Err(Error::Config(format!(
                    "policy layer {h} has {} states, MDP has {}",
                    self.rows[h].len(),
                    shape.layer_sizes[h]
                )));
            }
            if self.rows[h].iter().any(|r| r.len() != shape.num_actions) {
                return Err(Error::Config(format!(
                    "policy layer {h} rows do not match action count {}",
                    shape.num_actions
                )));
            }
        }
        Ok(())
    }
}

/// Table of per-`(s, a)` values on the loss-bearing layers `1..=H`.
/// Used both for loss functions and for occupancy measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaTable {
    /// `vals[h - 1][s][a]` for `h = 1..=H`.
    vals: Vec<Vec<Vec<f64>>>,
}

impl SaTable {
    pub fn new(vals: Vec<Vec<Vec<f64>>>) -> Self {
        Self { vals }
    }

    pub fn zeros(shape: &SpaceShape) -> Self {
        let vals = (1..=shape.horizon())
            .map(|h| vec![vec![0.0; shape.num_actions]; shape.layer_sizes[h]])
            .collect();
        Self { vals }
    }

    pub fn constant(shape: &SpaceShape, value: f64) -> Self {
        let vals = (1..=shape.horizon())
            .map(|h| vec![vec![value; shape.num_actions]; shape.layer_sizes[h]])
            .collect();
        Self { vals }
    }

    pub fn get(&self, s: State, action: usize) -> f64 {
        debug_assert!(s.layer >= 1);
        self.vals[s.layer - 1][s.index][action]
    }

    pub fn set(&mut self, s: State, action: usize, value: f64) {
        self.vals[s.layer - 1][s.index][action] = value;
    }

    pub fn add(&mut self, s: State, action: usize, value: f64) {
        self.vals[s.layer - 1][s.index][action] += value;
    }

    /// Iterate `(state, action, value)` in layer, state, action order.
    pub fn iter(&self) -> impl Iterator<Item = (State, usize, f64)> + '_ {
        self.vals.iter().enumerate().flat_map(|(h, layer)| {
            layer.iter().enumerate().flat_map(move |(s, row)| {
                row.iter()
                    .enumerate()
                    .map(move |(a, &v)| (State::new(h + 1, s), a, v))
            })
        })
    }

    pub fn num_layers(&self) -> usize {
        self.vals.len()
    }

    pub fn layer_len(&self, h: usize) -> usize {
        self.vals[h - 1].len()
    }

    pub fn actions_len(&self) -> usize {
        self.vals.first().map(|l| l[0].len()).unwrap_or(0)
    }

    fn check_bounds(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        for (s, a, v) in self.iter() {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Config(format!(
                    "{what}: value {v} at layer {} state {} action {a} outside [{lo}, {hi}]",
                    s.layer, s.index
                )));
            }
        }
        Ok(())
    }
}

/// An occupancy measure `q(s, a)` over the loss-bearing layers. Produced by
/// [`compute_occupancy`]; within each layer `1..=H` the entries sum to 1.
pub type OccupancyMeasure = SaTable;

/// The loss process: either a fixed table of Bernoulli means or an oblivious
/// adversarial schedule of loss tables, one per episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LossModel {
    /// `l_t(s, a) ~ Bernoulli(mean(s, a))`, i.i.d. over episodes.
    Stochastic(SaTable),
    /// `l_t` is read off the schedule; realized losses are the table values.
    Adversarial(Vec<SaTable>),
}

impl LossModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossModel::Stochastic(means) => means.check_bounds(0.0, 1.0, "stochastic loss means"),
            LossModel::Adversarial(tables) => {
                for t in tables {
                    t.check_bounds(0.0, 1.0, "adversarial loss table")?;
                }
                Ok(())
            }
        }
    }

    /// Expected loss table for episode `t` (1-based): the mean table in the
    /// stochastic case, the scheduled table in the adversarial case.
    pub fn mean_table(&self, t: usize) -> Result<&SaTable> {
        match self {
            LossModel::Stochastic(means) => Ok(means),
            LossModel::Adversarial(tables) => tables.get(t - 1).ok_or(Error::RunLength {
                episode: t,
                available: tables.len(),
            }),
        }
    }

    pub fn schedule_len(&self) -> Option<usize> {
        match self {
            LossModel::Stochastic(_) => None,
            LossModel::Adversarial(tables) => Some(tables.len()),
        }
    }
}

/// One step of an episode on a loss-bearing layer: the state index within
/// layer `h`, the action, and the realized loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub loss: f64,
}

/// One episode's record. `steps[h - 1]` is the visit to layer `h` for
/// `h = 1..=H`. The action taken at the unique start state is kept alongside
/// so the first transition `(s_0, a_0) -> s_1` is observable; the start step
/// carries no loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_action: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Sum of realized losses.
    pub fn total_loss(&self) -> f64 {
        self.steps.iter().map(|s| s.loss).sum()
    }

    /// State visited at layer `h` (`1..=H`).
    pub fn state_at(&self, h: usize) -> State {
        State::new(h, self.steps[h - 1].state)
    }
}

/// Exact occupancy measure of `policy` on `mdp` by forward recursion over
/// layers.
pub fn compute_occupancy(mdp: &LayeredMdp, policy: &Policy) -> Result<OccupancyMeasure> {
    policy.check_compatible(mdp.shape())?;
    let horizon = mdp.horizon();
    let mut q = SaTable::zeros(mdp.shape());
    // dist[s] = probability of standing at state s of the current layer.
    let mut dist = vec![1.0];
    for h in 0..=horizon {
        let mut next = vec![0.0; mdp.layer_size(h + 1)];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let state = State::new(h, s);
            for a in 0..mdp.num_actions() {
                let pa = mass * policy.prob(state, a);
                if pa == 0.0 {
                    continue;
                }
                if h >= 1 {
                    q.add(state, a, pa);
                }
                for (s2, &p) in mdp.row(state, a).iter().enumerate() {
                    if p > 0.0 {
                        next[s2] += pa * p;
                    }
                }
            }
        }
        dist = next;
    }
    Ok(q)
}

/// Inner product of an occupancy measure with a loss table.
pub fn expected_loss(q: &OccupancyMeasure, loss: &SaTable) -> Result<f64> {
    if q.num_layers() != loss.num_layers() || q.actions_len() != loss.actions_len() {
        return Err(Error::Config(
            "occupancy measure and loss table have mismatched domains".into(),
        ));
    }
    let mut total = 0.0;
    for (s, a, v) in q.iter() {
        total += v * loss.get(s, a);
    }
    Ok(total)
}

/// Sample a single episode. Actions are drawn from the policy, successor
/// states from the transition rows, losses per the loss model; `t` is the
/// 1-based episode index (used by adversarial schedules). Deterministic given
/// the rng state.
pub fn sample_trajectory<R: Rng>(
    mdp: &LayeredMdp,
    policy: &Policy,
    loss: &LossModel,
    t: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    policy.check_compatible(mdp.shape())?;
    let table = match loss {
        LossModel::Stochastic(means) => means,
        LossModel::Adversarial(tables) => tables.get(t - 1).ok_or(Error::RunLength {
            episode: t,
            available: tables.len(),
        })?,
    };
    let horizon = mdp.horizon();
    let mut steps = Vec::with_capacity(horizon);
    let mut state = State::new(0, 0);
    let mut start_action = 0;
    for h in 0..=horizon {
        let action = sample_index(policy.row(state), rng);
        let realized = if h == 0 {
            start_action = action;
            0.0
        } else {
            let mean = table.get(state, action);
            match loss {
                LossModel::Stochastic(_) => {
                    if rng.gen::<f64>() < mean {
                        1.0
                    } else {
                        0.0
                    }
                }
                LossModel::Adversarial(_) => mean,
            }
        };
        if h >= 1 {
            steps.push(Step { state: state.index, action, loss: realized });
        }
        let next = sample_index(mdp.row(state, action), rng);
        state = State::new(h + 1, next);
    }
    Ok(Trajectory { start_action, steps })
}

/// Draw an index from a probability vector by inverse-CDF scan. Consumes one
/// uniform regardless of the vector length, so padding a row with zero-mass
/// entries does not perturb the stream.
pub fn sample_index<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Guard against accumulated rounding: fall back to the last positive entry.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Deterministic policy minimizing `<q^{P, pi}, summed_losses>` by backward
/// dynamic programming, plus the achieved value. Optimal over all stochastic
/// policies since the objective is linear in the occupancy measure. Ties go
/// to the lowest action index.
pub fn best_in_hindsight(mdp: &LayeredMdp, summed_losses: &SaTable) -> Result<(Policy, f64)> {
    for (_, _, v) in summed_losses.iter() {
        if !v.is_finite() {
            return Err(Error::Config("summed losses must be finite".into()));
        }
    }
    let horizon = mdp.horizon();
    let mut value = vec![0.0; 1]; // layer H + 1
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); horizon + 1];
    for h in (0..=horizon).rev() {
        let mut layer_value = vec![0.0; mdp.layer_size(h)];
        let mut layer_actions = vec![0; mdp.layer_size(h)];
        for s in 0..mdp.layer_size(h) {
            let state = State::new(h, s);
            let mut best = f64::INFINITY;
            let mut best_a = 0;
            for a in 0..mdp.num_actions() {
                let step_loss = if h >= 1 { summed_losses.get(state, a) } else { 0.0 };
                let cont: f64 = mdp
                    .row(state, a)
                    .iter()
                    .zip(value.iter())
                    .map(|(&p, &v)| p * v)
                    .sum();
                let total = step_loss + cont;
                if total < best {
                    best = total;
                    best_a = a;
                }
            }
            layer_value[s] = best;
            layer_actions[s] = best_a;
        }
        value = layer_value;
        actions[h] = layer_actions;
    }
    Ok((Policy::deterministic(mdp.shape(), &actions), value[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Deterministic chain: one state per layer, one action.
    fn chain(h: usize) -> LayeredMdp {
        let shape = SpaceShape::new(vec![1; h + 2], 1).unwrap();
        let rows = (0..=h).map(|_| vec![vec![vec![1.0]]]).collect();
        LayeredMdp::new(shape, rows).unwrap()
    }

    fn random_mdp(shape: &SpaceShape, rng: &mut ChaCha8Rng) -> LayeredMdp {
        let rows = (0..=shape.horizon())
            .map(|h| {
                (0..shape.layer_sizes[h])
                    .map(|_| {
                        (0..shape.num_actions)
                            .map(|_| {
                                let mut row: Vec<f64> =
                                    (0..shape.layer_sizes[h + 1]).map(|_| rng.gen::<f64>() + 0.05).collect();
                                let sum: f64 = row.iter().sum();
                                row.iter_mut().for_each(|p| *p /= sum);
                                row
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        LayeredMdp::new(shape.clone(), rows).unwrap()
    }

    fn random_policy(shape: &SpaceShape, rng: &mut ChaCha8Rng) -> Policy {
        let rows = (0..=shape.horizon())
            .map(|h| {
                (0..shape.layer_sizes[h])
                    .map(|_| {
                        let mut row: Vec<f64> =
                            (0..shape.num_actions).map(|_| rng.gen::<f64>() + 0.05).collect();
                        let sum: f64 = row.iter().sum();
                        row.iter_mut().for_each(|p| *p /= sum);
                        row
                    })
                    .collect()
            })
            .collect();
        Policy::new(rows).unwrap()
    }

    #[test]
    fn occupancy_identity_chain() {
        let mdp = chain(2);
        let policy = Policy::uniform(mdp.shape());
        let q = compute_occupancy(&mdp, &policy).unwrap();
        assert_eq!(q.get(State::new(1, 0), 0), 1.0);
        assert_eq!(q.get(State::new(2, 0), 0), 1.0);
    }

    #[test]
    fn occupancy_layer_one_split() {
        // P(u | s0, a) = 0.3, P(v | s0, a) = 0.7, single action.
        let shape = SpaceShape::new(vec![1, 2, 1], 1).unwrap();
        let rows = vec![
            vec![vec![vec![0.3, 0.7]]],
            vec![vec![vec![1.0]], vec![vec![1.0]]],
        ];
        let mdp = LayeredMdp::new(shape, rows).unwrap();
        let q = compute_occupancy(&mdp, &Policy::uniform(mdp.shape())).unwrap();
        assert!((q.get(State::new(1, 0), 0) - 0.3).abs() < 1e-15);
        assert!((q.get(State::new(1, 1), 0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn occupancy_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = SpaceShape::new(vec![1, 3, 2, 3, 1], 2).unwrap();
        let mdp = random_mdp(&shape, &mut rng);
        let policy = random_policy(&shape, &mut rng);
        let q = compute_occupancy(&mdp, &policy).unwrap();

        let loss = LossModel::Stochastic(SaTable::zeros(&shape));
        let n = 1_000_000usize;
        let mut counts = SaTable::zeros(&shape);
        for t in 1..=n {
            let traj = sample_trajectory(&mdp, &policy, &loss, t, &mut rng).unwrap();
            for (h, step) in traj.steps.iter().enumerate() {
                counts.add(State::new(h + 1, step.state), step.action, 1.0);
            }
        }
        for (s, a, expected) in q.iter() {
            let freq = counts.get(s, a) / n as f64;
            let se = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!(
                (freq - expected).abs() <= 3.0 * se + 1e-9,
                "layer {} state {} action {a}: freq {freq} vs q {expected}",
                s.layer,
                s.index
            );
        }
    }

    #[test]
    fn occupancy_normalizes_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let shape = SpaceShape::new(vec![1, 3, 3, 1], 3).unwrap();
            let mdp = random_mdp(&shape, &mut rng);
            let policy = random_policy(&shape, &mut rng);
            let q = compute_occupancy(&mdp, &policy).unwrap();
            for h in 1..=shape.horizon() {
                let mass: f64 = (0..shape.layer_sizes[h])
                    .flat_map(|s| (0..shape.num_actions).map(move |a| (s, a)))
                    .map(|(s, a)| q.get(State::new(h, s), a))
                    .sum();
                assert!((mass - 1.0).abs() < OCCUPANCY_TOL);
            }
        }
    }

    #[test]
    fn expected_loss_point_mass_and_zero() {
        let shape = SpaceShape::new(vec![1, 2, 2, 1], 2).unwrap();
        let mut q = SaTable::zeros(&shape);
        q.set(State::new(1, 1), 0, 1.0);
        q.set(State::new(2, 0), 0, 1.0);
        let mut loss = SaTable::zeros(&shape);
        loss.set(State::new(1, 1), 0, 0.4);
        assert!((expected_loss(&q, &loss).unwrap() - 0.4).abs() < 1e-15);
        let zeros = SaTable::zeros(&shape);
        assert_eq!(expected_loss(&q, &zeros).unwrap(), 0.0);
    }

    #[test]
    fn expected_loss_matches_dp() {
        // Layer-wise DP for the expected cumulative loss of a fixed policy.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = SpaceShape::new(vec![1, 3, 2, 1], 2).unwrap();
        let mdp = random_mdp(&shape, &mut rng);
        let policy = random_policy(&shape, &mut rng);
        let mut loss = SaTable::zeros(&shape);
        for h in 1..=shape.horizon() {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..shape.num_actions {
                    loss.set(State::new(h, s), a, rng.gen::<f64>());
                }
            }
        }
        let q = compute_occupancy(&mdp, &policy).unwrap();
        let via_q = expected_loss(&q, &loss).unwrap();

        // Backward policy evaluation.
        let mut value = vec![0.0; 1];
        for h in (0..=shape.horizon()).rev() {
            let mut next = vec![0.0; shape.layer_sizes[h]];
            for s in 0..shape.layer_sizes[h] {
                let state = State::new(h, s);
                let mut v = 0.0;
                for a in 0..shape.num_actions {
                    let step = if h >= 1 { loss.get(state, a) } else { 0.0 };
                    let cont: f64 = mdp
                        .row(state, a)
                        .iter()
                        .zip(value.iter())
                        .map(|(&p, &w)| p * w)
                        .sum();
                    v += policy.prob(state, a) * (step + cont);
                }
                next[s] = v;
            }
            value = next;
        }
        assert!((via_q - value[0]).abs() < 1e-12, "{via_q} vs {}", value[0]);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let mut setup_rng = ChaCha8Rng::seed_from_u64(99);
        let shape = SpaceShape::new(vec![1, 3, 3, 1], 2).unwrap();
        let mdp = random_mdp(&shape, &mut setup_rng);
        let policy = random_policy(&shape, &mut setup_rng);
        let loss = LossModel::Stochastic(SaTable::constant(&shape, 0.5));
        let a = sample_trajectory(&mdp, &policy, &loss, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_trajectory(&mdp, &policy, &loss, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chain_with_zero_loss_is_unique_trajectory() {
        let mdp = chain(3);
        let policy = Policy::uniform(mdp.shape());
        let loss = LossModel::Stochastic(SaTable::zeros(mdp.shape()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = sample_trajectory(&mdp, &policy, &loss, 1, &mut rng).unwrap();
        assert_eq!(traj.steps.len(), 3);
        assert!(traj.steps.iter().all(|s| s.state == 0 && s.loss == 0.0));
    }

    #[test]
    fn layer_frequency_matches_transition() {
        let shape = SpaceShape::new(vec![1, 2, 1], 1).unwrap();
        let rows = vec![
            vec![vec![vec![0.3, 0.7]]],
            vec![vec![vec![1.0]], vec![vec![1.0]]],
        ];
        let mdp = LayeredMdp::new(shape, rows).unwrap();
        let policy = Policy::uniform(mdp.shape());
        let loss = LossModel::Stochastic(SaTable::zeros(mdp.shape()));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut hits = 0usize;
        for t in 1..=n {
            let traj = sample_trajectory(&mdp, &policy, &loss, t, &mut rng).unwrap();
            if traj.steps[0].state == 0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((freq - 0.3).abs() <= 3.0 * se, "freq {freq}");
    }

    #[test]
    fn adversarial_schedule_exhaustion_errors() {
        let mdp = chain(1);
        let policy = Policy::uniform(mdp.shape());
        let loss = LossModel::Adversarial(vec![SaTable::zeros(mdp.shape())]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_trajectory(&mdp, &policy, &loss, 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::RunLength { episode: 2, available: 1 }));
    }

    #[test]
    fn best_in_hindsight_single_decision() {
        let shape = SpaceShape::new(vec![1, 1, 1], 2).unwrap();
        let rows = vec![
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![vec![1.0], vec![1.0]]],
        ];
        let mdp = LayeredMdp::new(shape, rows).unwrap();
        let mut losses = SaTable::zeros(mdp.shape());
        losses.set(State::new(1, 0), 0, 3.0);
        losses.set(State::new(1, 0), 1, 5.0);
        let (policy, value) = best_in_hindsight(&mdp, &losses).unwrap();
        assert_eq!(value, 3.0);
        assert_eq!(policy.prob(State::new(1, 0), 0), 1.0);
    }

    #[test]
    fn best_in_hindsight_zero_losses_picks_lowest_action() {
        let shape = SpaceShape::new(vec![1, 2, 1], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = random_mdp(&shape, &mut rng);
        let (policy, value) = best_in_hindsight(&mdp, &SaTable::zeros(&shape)).unwrap();
        assert_eq!(value, 0.0);
        for s in 0..2 {
            assert_eq!(policy.prob(State::new(1, s), 0), 1.0);
        }
    }

    #[test]
    fn best_in_hindsight_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..10 {
            let shape = SpaceShape::new(vec![1, 2, 2, 1], 2).unwrap();
            let mdp = random_mdp(&shape, &mut rng);
            let mut losses = SaTable::zeros(&shape);
            for h in 1..=shape.horizon() {
                for s in 0..shape.layer_sizes[h] {
                    for a in 0..shape.num_actions {
                        losses.set(State::new(h, s), a, rng.gen::<f64>() * 4.0);
                    }
                }
            }
            let (_, dp_value) = best_in_hindsight(&mdp, &losses).unwrap();

            // Enumerate all deterministic policies.
            let decisions: Vec<(usize, usize)> = (0..=shape.horizon())
                .flat_map(|h| (0..shape.layer_sizes[h]).map(move |s| (h, s)))
                .collect();
            let n_pol = shape.num_actions.pow(decisions.len() as u32);
            let mut best = f64::INFINITY;
            for code in 0..n_pol {
                let mut c = code;
                let mut actions: Vec<Vec<usize>> = (0..=shape.horizon())
                    .map(|h| vec![0; shape.layer_sizes[h]])
                    .collect();
                for &(h, s) in &decisions {
                    actions[h][s] = c % shape.num_actions;
                    c /= shape.num_actions;
                }
                let pol = Policy::deterministic(&shape, &actions);
                let q = compute_occupancy(&mdp, &pol).unwrap();
                let v = expected_loss(&q, &losses).unwrap();
                best = best.min(v);
            }
            assert!((dp_value - best).abs() < 1e-10, "round {round}: {dp_value} vs {best}");
            // The DP optimum lower-bounds every deterministic policy's value.
            assert!(dp_value <= best + 1e-10);
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let shape = SpaceShape::new(vec![1, 1, 1], 1).unwrap();
        let rows = vec![vec![vec![vec![0.9]]], vec![vec![vec![1.0]]]];
        assert!(LayeredMdp::new(shape, rows).is_err());
    }
}
