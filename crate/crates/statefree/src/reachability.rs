//! Visit counting, arrival bookkeeping, and the reachability admission test.
//!
//! The driver certifies a state as reachable once its episode-level visit
//! count clears an anytime threshold:
//!
//! ```text
//! n_t(s) / 2  -  ln(2 H^2 t^2 / delta) / 2  -  1/2  >  eps * t
//! ```
//!
//! with the natural logarithm throughout and the additive constant exposed
//! as a knob. The threshold is backed by a supermartingale concentration
//! bound (checkable by Monte Carlo via [`lemma8_monte_carlo`]): passing it
//! certifies, with confidence, that some policy reaches the state with
//! probability above `eps`.
//!
//! [`VisitStats`] also freezes count snapshots at every epoch where a new
//! state first appears. Those snapshots are what the arrival-time confidence
//! sets in [`crate::confidence`] are built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{State, Trajectory};

/// Per-state arrival record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateRecord {
    /// Number of episodes in which the state was visited (at most one visit
    /// per episode under the layered structure).
    pub episode_visits: u64,
    /// Episode of the first visit, `t(s)`.
    pub arrival_epoch: usize,
    /// Rank by arrival time, 1-based; ties within an episode broken by
    /// layer, then state index.
    pub arrival_index: usize,
}

/// Counts frozen at the start of an epoch in which a new state arrived:
/// everything here reflects episodes strictly before that epoch.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CountSnapshot {
    pair: BTreeMap<(State, usize), u64>,
    triple: BTreeMap<(State, usize, usize), u64>,
    /// Number of distinct states visited strictly before the epoch.
    pub distinct_before: usize,
}

impl CountSnapshot {
    pub fn pair_count(&self, s: State, a: usize) -> u64 {
        self.pair.get(&(s, a)).copied().unwrap_or(0)
    }

    pub fn triple_count(&self, s: State, a: usize, next_index: usize) -> u64 {
        self.triple.get(&(s, a, next_index)).copied().unwrap_or(0)
    }
}

/// Full-space visit statistics, fed one trajectory per episode.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VisitStats {
    last_episode: usize,
    states: BTreeMap<State, StateRecord>,
    arrival_order: Vec<State>,
    pair: BTreeMap<(State, usize), u64>,
    triple: BTreeMap<(State, usize, usize), u64>,
    snapshots: BTreeMap<usize, CountSnapshot>,
}

impl VisitStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_episode(&self) -> usize {
        self.last_episode
    }

    /// Record the full-space trajectory of episode `t`. Episodes must arrive
    /// in strictly increasing order.
    pub fn record_episode(&mut self, o: &Trajectory, t: usize) -> Result<()> {
        if t <= self.last_episode {
            return Err(Error::OutOfOrderEpisode { got: t, last: self.last_episode });
        }
        self.last_episode = t;

        // The episode's visited states: the start state plus one per layer.
        let mut visited = vec![State::new(0, 0)];
        visited.extend((1..=o.horizon()).map(|h| o.state_at(h)));

        // New arrivals freeze a snapshot of the counts before this epoch.
        let mut new_states: Vec<State> =
            visited.iter().copied().filter(|s| !self.states.contains_key(s)).collect();
        if !new_states.is_empty() {
            self.snapshots.insert(
                t,
                CountSnapshot {
                    pair: self.pair.clone(),
                    triple: self.triple.clone(),
                    distinct_before: self.arrival_order.len(),
                },
            );
            new_states.sort(); // layer order, then state index
            for s in new_states {
                let record = StateRecord {
                    episode_visits: 0,
                    arrival_epoch: t,
                    arrival_index: self.arrival_order.len() + 1,
                };
                self.states.insert(s, record);
                self.arrival_order.push(s);
            }
        }

        for s in &visited {
            self.states.get_mut(s).expect("all visited states recorded").episode_visits += 1;
        }

        // Pair and triple counts, including the start step.
        let mut prev = (State::new(0, 0), o.start_action);
        for step in &o.steps {
            let s = State::new(prev.0.layer + 1, step.state);
            *self.pair.entry((s, step.action)).or_insert(0) += 1;
            *self.triple.entry((prev.0, prev.1, step.state)).or_insert(0) += 1;
            prev = (s, step.action);
        }
        *self.pair.entry((State::new(0, 0), o.start_action)).or_insert(0) += 1;
        Ok(())
    }

    /// Episode-level visit count `n_t(s)` as of the last recorded episode.
    pub fn visits(&self, s: State) -> u64 {
        self.states.get(&s).map(|r| r.episode_visits).unwrap_or(0)
    }

    /// First-visit epoch `t(s)`; `None` if unvisited.
    pub fn arrival_epoch(&self, s: State) -> Option<usize> {
        self.states.get(&s).map(|r| r.arrival_epoch)
    }

    /// Arrival rank `i(s)`; `None` if unvisited.
    pub fn arrival_index(&self, s: State) -> Option<usize> {
        self.states.get(&s).map(|r| r.arrival_index)
    }

    /// Epoch at which both states have been seen, `max(t(s), t(s'))`.
    pub fn joint_arrival_epoch(&self, s: State, s2: State) -> Option<usize> {
        Some(self.arrival_epoch(s)?.max(self.arrival_epoch(s2)?))
    }

    pub fn pair_count(&self, s: State, a: usize) -> u64 {
        self.pair.get(&(s, a)).copied().unwrap_or(0)
    }

    pub fn triple_count(&self, s: State, a: usize, next_index: usize) -> u64 {
        self.triple.get(&(s, a, next_index)).copied().unwrap_or(0)
    }

    /// Number of distinct states visited so far.
    pub fn distinct_visited(&self) -> usize {
        self.arrival_order.len()
    }

    /// Number of distinct states visited strictly before epoch `t`.
    pub fn distinct_visited_before(&self, t: usize) -> usize {
        self.arrival_order
            .iter()
            .filter(|s| self.states[s].arrival_epoch < t)
            .count()
    }

    /// Counts frozen at the start of epoch `t`, present whenever some state
    /// first arrived at `t`.
    pub fn snapshot_at(&self, t: usize) -> Option<&CountSnapshot> {
        self.snapshots.get(&t)
    }

    /// All visited states in arrival order.
    pub fn visited_states(&self) -> &[State] {
        &self.arrival_order
    }

    pub fn record(&self, s: State) -> Option<&StateRecord> {
        self.states.get(&s)
    }
}

/// Default additive constant of the admission threshold.
pub const DEFAULT_ADMISSION_CONSTANT: f64 = 0.5;

/// Left-hand side minus right-hand side of the admission inequality; the
/// test passes when this is strictly positive.
pub fn admission_margin(
    visits: u64,
    t: usize,
    delta: f64,
    eps: f64,
    horizon: usize,
    constant: f64,
) -> f64 {
    let h = horizon as f64;
    let t_f = t as f64;
    let threshold = (2.0 * h * h * t_f * t_f / delta).ln() / 2.0;
    visits as f64 / 2.0 - threshold - constant - eps * t_f
}

/// The admission test: certifies `max_pi q(s) > eps` with confidence
/// `delta` from the episode-level visit count alone.
pub fn admission_test(
    stats: &VisitStats,
    s: State,
    t: usize,
    delta: f64,
    eps: f64,
    horizon: usize,
    constant: f64,
) -> bool {
    admission_margin(stats.visits(s), t, delta, eps, horizon, constant) > 0.0
}

/// Families of bounded sequences for the concentration check.
#[derive(Debug, Clone, Copy)]
pub enum SequenceFamily {
    /// `X_t = P_t = 0` for all `t`.
    DeterministicZero,
    /// i.i.d. Bernoulli draws with the given mean.
    IidBernoulli(f64),
}

/// Outcome of the supermartingale Monte Carlo: empirical rates at which each
/// one-sided anytime bound is violated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConcentrationOutcome {
    /// Fraction of trials with `exists n: sum X > 2 sum P + ln(1/delta)`.
    pub upper_violation_rate: f64,
    /// Fraction of trials with `exists n: sum P > 2 sum X + ln(1/delta)`.
    pub lower_violation_rate: f64,
    pub trials: usize,
}

impl ConcentrationOutcome {
    /// Three binomial standard errors around the nominal rate.
    pub fn tolerance(&self, delta: f64) -> f64 {
        3.0 * (delta * (1.0 - delta) / self.trials as f64).sqrt()
    }
}

/// Estimate the violation rates of both one-sided anytime bounds over
/// independent sequences of length `horizon_n`.
pub fn lemma8_monte_carlo(
    family: SequenceFamily,
    delta: f64,
    horizon_n: usize,
    trials: usize,
    seed: u64,
) -> ConcentrationOutcome {
    let log_term = (1.0 / delta).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut upper = 0usize;
    let mut lower = 0usize;
    for _ in 0..trials {
        let mut sum_x = 0.0f64;
        let mut sum_p = 0.0f64;
        let mut upper_hit = false;
        let mut lower_hit = false;
        for _ in 0..horizon_n {
            let (x, p) = match family {
                SequenceFamily::DeterministicZero => (0.0, 0.0),
                SequenceFamily::IidBernoulli(mean) => {
                    let x = if rng.gen::<f64>() < mean { 1.0 } else { 0.0 };
                    (x, mean)
                }
            };
            sum_x += x;
            sum_p += p;
            if !upper_hit && sum_x > 2.0 * sum_p + log_term {
                upper_hit = true;
            }
            if !lower_hit && sum_p > 2.0 * sum_x + log_term {
                lower_hit = true;
            }
            if upper_hit && lower_hit {
                break;
            }
        }
        upper += upper_hit as usize;
        lower += lower_hit as usize;
    }
    ConcentrationOutcome {
        upper_violation_rate: upper as f64 / trials as f64,
        lower_violation_rate: lower as f64 / trials as f64,
        trials,
    }
}
