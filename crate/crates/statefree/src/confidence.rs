//! Transition confidence sets.
//!
//! Two constructions live here:
//!
//! - the classical empirical-Bernstein set, whose widths carry a
//!   `ln(4 T |S| |A| / delta)` union-bound factor over the whole space, and
//! - an improved two-interval set whose confidence is allocated per state by
//!   arrival time, so unvisited states cost nothing and the widths are
//!   independent of the ambient state count.
//!
//! The improved set intersects, per admitted triple `(s, a, s')`:
//!
//! - `I1`, a Bernstein interval around the partial empirical mean built from
//!   episodes after both `s` and `s'` were first seen (the confidence level
//!   becomes measurable exactly then), and
//! - `I2 = [0, eps2]`, active when `s'` arrived strictly after `s`: the
//!   visits to `(s, a)` that failed to reach `s'` before `s'` first appeared
//!   certify an upper bound on `P(s' | s, a)`.
//!
//! Per-state confidence levels shrink like `1 / i(s)^2` in the arrival rank
//! `i(s)`, which keeps the total spent confidence summable over any number
//! of discovered states. Because the set is built from persistent full-run
//! statistics, it survives learner restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{LayeredMdp, SpaceShape, State};
use crate::pruned::PrunedSpace;
use crate::reachability::VisitStats;

/// A closed subinterval of [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const FULL: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn point(p: f64) -> Self {
        Self { lo: p, hi: p }
    }

    /// Clamp both ends into [0, 1].
    pub fn clamped(lo: f64, hi: f64) -> Self {
        Self { lo: lo.clamp(0.0, 1.0), hi: hi.clamp(0.0, 1.0) }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }

    /// Intersection; falls back to the union hull when empty (second return
    /// flags the fallback).
    pub fn intersect_or_hull(&self, other: &Interval) -> (Interval, bool) {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo <= hi {
            (Interval { lo, hi }, false)
        } else {
            (Interval { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }, true)
        }
    }
}

/// Which construction produced a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Baseline,
    Improved,
}

/// Per-triple intervals over a layered space, with auxiliary rows pinned to
/// the absorbing point mass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionConfidenceSet {
    shape: SpaceShape,
    provenance: Provenance,
    /// `rows[h][s][a][s']` for `h = 0..=H`.
    rows: Vec<Vec<Vec<Vec<Interval>>>>,
    hull_fallbacks: u64,
}

impl TransitionConfidenceSet {
    fn empty(shape: SpaceShape, provenance: Provenance) -> Self {
        let rows = (0..=shape.horizon())
            .map(|h| {
                vec![
                    vec![vec![Interval::FULL; shape.layer_sizes[h + 1]]; shape.num_actions];
                    shape.layer_sizes[h]
                ]
            })
            .collect();
        Self { shape, provenance, rows, hull_fallbacks: 0 }
    }

    /// Degenerate zero-width set pinned to an exact transition function.
    pub fn exact(mdp: &LayeredMdp) -> Self {
        Self::widened(mdp, 0.0)
    }

    /// The exact set of `mdp` widened entrywise by `width` and clamped.
    pub fn widened(mdp: &LayeredMdp, width: f64) -> Self {
        let shape = mdp.shape().clone();
        let mut set = Self::empty(shape.clone(), Provenance::Baseline);
        for h in 0..=shape.horizon() {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..shape.num_actions {
                    for s2 in 0..shape.layer_sizes[h + 1] {
                        let p = mdp.prob(State::new(h, s), a, s2);
                        set.rows[h][s][a][s2] = Interval::clamped(p - width, p + width);
                    }
                }
            }
        }
        set
    }

    pub fn shape(&self) -> &SpaceShape {
        &self.shape
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Number of empty `I1 ∩ I2` intersections replaced by union hulls.
    pub fn hull_fallbacks(&self) -> u64 {
        self.hull_fallbacks
    }

    pub fn interval(&self, s: State, a: usize, next_index: usize) -> Interval {
        self.rows[s.layer][s.index][a][next_index]
    }

    pub fn row(&self, s: State, a: usize) -> &[Interval] {
        &self.rows[s.layer][s.index][a]
    }

    pub(crate) fn set_interval(&mut self, s: State, a: usize, next_index: usize, iv: Interval) {
        self.rows[s.layer][s.index][a][next_index] = iv;
    }

    /// A row is feasible when some probability vector fits all its intervals.
    pub fn row_feasible(&self, s: State, a: usize) -> bool {
        let row = self.row(s, a);
        let lo_sum: f64 = row.iter().map(|iv| iv.lo).sum();
        let hi_sum: f64 = row.iter().map(|iv| iv.hi).sum();
        lo_sum <= 1.0 + 1e-9 && hi_sum >= 1.0 - 1e-9
    }

    pub fn check_feasible(&self) -> Result<()> {
        for h in 0..=self.shape.horizon() {
            for s in 0..self.shape.layer_sizes[h] {
                for a in 0..self.shape.num_actions {
                    if !self.row_feasible(State::new(h, s), a) {
                        return Err(Error::ConfidenceInconsistency(format!(
                            "row (layer {h}, state {s}, action {a}) admits no probability vector"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Does the set contain a full transition function (entrywise)?
    pub fn contains_mdp(&self, mdp: &LayeredMdp) -> bool {
        for h in 0..=self.shape.horizon() {
            for s in 0..self.shape.layer_sizes[h] {
                for a in 0..self.shape.num_actions {
                    for s2 in 0..self.shape.layer_sizes[h + 1] {
                        if !self.rows[h][s][a][s2].contains(mdp.prob(State::new(h, s), a, s2)) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Width formulas
// ---------------------------------------------------------------------------

/// Classical empirical-Bernstein width:
/// `2 sqrt(p_bar L / max(1, n - 1)) + 14 L / (3 max(1, n - 1))` with
/// `L = ln(4 T |S| |A| / delta)`.
pub fn baseline_width(
    p_bar: f64,
    n: u64,
    state_count: usize,
    action_count: usize,
    total_episodes: usize,
    delta: f64,
) -> f64 {
    let l = (4.0 * total_episodes as f64 * state_count as f64 * action_count as f64 / delta).ln();
    let denom = (n.saturating_sub(1)).max(1) as f64;
    2.0 * (p_bar * l / denom).sqrt() + 14.0 * l / (3.0 * denom)
}

/// Half-width of the first improved interval. `effective_n` is the number of
/// `(s, a)` visits after both endpoints arrived, `N_t(s,a) - N_{t(s,s')}(s,a)`;
/// one visit is spent fixing the confidence level.
pub fn improved_halfwidth_1(p_bar_partial: f64, effective_n: u64, t: usize, delta_sas: f64) -> f64 {
    let l = (t as f64 / delta_sas).ln();
    let denom = (effective_n.saturating_sub(1)).max(1) as f64;
    4.0 * (p_bar_partial * l / denom).sqrt() + 20.0 * l / denom
}

/// Upper bound of the second improved interval: visits to `(s, a)` before
/// `s'` first appeared certify how small `P(s' | s, a)` must be.
/// `distinct_before` is the number of states seen strictly before `t(s')`,
/// `n_at_arrival` is `N_{t(s')}(s, a)`.
pub fn improved_width_2(distinct_before: usize, n_at_arrival: u64, t: usize, delta_sa: f64) -> f64 {
    let l = (t as f64 / delta_sa).ln();
    let denom = (n_at_arrival.saturating_sub(1)).max(1) as f64;
    (2.0 * distinct_before as f64 + 24.0 * l) / denom
}

/// Arrival-rank confidence allocation:
/// `delta(s, a) = delta / (4 i(s)^2 |A|)` and
/// `delta(s, a, s') = delta / (4 (i(s)^4 + i(s')^4) |A|)`.
/// Summed over any set of discovered states this spends at most `delta / 2`
/// on each family.
pub fn allocate_confidence(i_s: usize, i_s2: usize, action_count: usize, delta: f64) -> (f64, f64) {
    let i = i_s as f64;
    let j = i_s2 as f64;
    let a = action_count as f64;
    let delta_sa = delta / (4.0 * i * i * a);
    let delta_sas = delta / (4.0 * (i.powi(4) + j.powi(4)) * a);
    (delta_sa, delta_sas)
}

// ---------------------------------------------------------------------------
// Interval constructors over visit statistics (full-space states)
// ---------------------------------------------------------------------------

/// First improved interval for the full-space triple `(s, a, s')` at epoch
/// `t`. `[0, 1]` unless both endpoints have been visited.
pub fn improved_interval_1(
    stats: &VisitStats,
    s: State,
    a: usize,
    s2: State,
    t: usize,
    delta_sas: f64,
) -> Interval {
    let Some(joint) = stats.joint_arrival_epoch(s, s2) else {
        return Interval::FULL;
    };
    let snap = stats.snapshot_at(joint).expect("arrival epochs always have snapshots");
    let n_total = stats.pair_count(s, a);
    let m_total = stats.triple_count(s, a, s2.index);
    let n_before = snap.pair_count(s, a);
    let m_before = snap.triple_count(s, a, s2.index);
    let effective_n = n_total.saturating_sub(n_before);
    let effective_m = m_total.saturating_sub(m_before);
    let center = effective_m as f64 / effective_n.max(1) as f64;
    let hw = improved_halfwidth_1(center, effective_n, t, delta_sas);
    Interval::clamped(center - hw, center + hw)
}

/// Second improved interval: active only when `s'` arrived strictly after
/// `s`, otherwise `[0, 1]`.
pub fn improved_interval_2(
    stats: &VisitStats,
    s: State,
    a: usize,
    s2: State,
    t: usize,
    delta_sa: f64,
) -> Interval {
    let (Some(t_s), Some(t_s2)) = (stats.arrival_epoch(s), stats.arrival_epoch(s2)) else {
        return Interval::FULL;
    };
    if t_s2 < t_s + 1 {
        return Interval::FULL;
    }
    let snap = stats.snapshot_at(t_s2).expect("arrival epochs always have snapshots");
    let width = improved_width_2(snap.distinct_before, snap.pair_count(s, a), t, delta_sa);
    Interval::clamped(0.0, width)
}

/// Build the improved confidence set over the current pruned space at epoch
/// `t` from persistent full-space statistics.
///
/// Admitted-to-admitted entries get `I1 ∩ I2` (clamped; empty intersections
/// fall back to the union hull and are counted). Auxiliary-source rows are
/// pinned to the absorbing point mass. The auxiliary-successor entry of a
/// real row is the slack left by the real intervals, and the final layer's
/// single terminal successor is pinned to probability one.
pub fn build_improved_set(
    stats: &VisitStats,
    space: &PrunedSpace,
    t: usize,
    delta: f64,
) -> TransitionConfidenceSet {
    let shape = space.shape();
    let horizon = shape.horizon();
    let actions = shape.num_actions;
    let mut set = TransitionConfidenceSet::empty(shape.clone(), Provenance::Improved);

    for h in 0..=horizon {
        for sp in 0..shape.layer_sizes[h] {
            let source_full = space.full_index(h, sp).map(|i| State::new(h, i));
            for a in 0..actions {
                if h >= 1 && space.is_aux(h, sp) {
                    // Absorbing row, known exactly.
                    let succ = shape.layer_sizes[h + 1];
                    let target = if h == horizon { 0 } else { space.aux_index(h + 1) };
                    for s2 in 0..succ {
                        let iv = if s2 == target { Interval::point(1.0) } else { Interval::point(0.0) };
                        set.set_interval(State::new(h, sp), a, s2, iv);
                    }
                    continue;
                }
                let s = source_full.expect("real pruned index maps to a full state");
                if h == horizon {
                    // Single terminal successor: forced.
                    set.set_interval(State::new(h, sp), a, 0, Interval::point(1.0));
                    continue;
                }
                let mut lo_sum = 0.0;
                let mut hi_sum = 0.0;
                for (next_pruned, &next_full) in space.admitted(h + 1).iter().enumerate() {
                    let s2 = State::new(h + 1, next_full);
                    let iv = match (stats.arrival_index(s), stats.arrival_index(s2)) {
                        (Some(i_s), Some(i_s2)) => {
                            let (delta_sa, delta_sas) = allocate_confidence(i_s, i_s2, actions, delta);
                            let i1 = improved_interval_1(stats, s, a, s2, t, delta_sas);
                            let i2 = improved_interval_2(stats, s, a, s2, t, delta_sa);
                            let (iv, fell_back) = i1.intersect_or_hull(&i2);
                            if fell_back {
                                set.hull_fallbacks += 1;
                            }
                            iv
                        }
                        // No confidence is spent before both endpoints arrive.
                        _ => Interval::FULL,
                    };
                    lo_sum += iv.lo;
                    hi_sum += iv.hi;
                    set.set_interval(State::new(h, sp), a, next_pruned, iv);
                }
                // Slack interval for the auxiliary successor.
                let aux = Interval::clamped(1.0 - hi_sum, 1.0 - lo_sum);
                set.set_interval(State::new(h, sp), a, space.aux_index(h + 1), aux);
            }
        }
    }
    set
}

/// Build the classical set over an arbitrary shape from empirical counts
/// (provided as closures so both driver-side and learner-side tables fit).
/// The last layer's terminal successor is pinned.
pub fn build_baseline_set(
    shape: &SpaceShape,
    pair_count: &dyn Fn(State, usize) -> u64,
    triple_count: &dyn Fn(State, usize, usize) -> u64,
    total_episodes: usize,
    delta: f64,
) -> TransitionConfidenceSet {
    let horizon = shape.horizon();
    let state_count = shape.interior_state_count();
    let mut set = TransitionConfidenceSet::empty(shape.clone(), Provenance::Baseline);
    for h in 0..=horizon {
        for s in 0..shape.layer_sizes[h] {
            let state = State::new(h, s);
            for a in 0..shape.num_actions {
                if h == horizon {
                    set.set_interval(state, a, 0, Interval::point(1.0));
                    continue;
                }
                let n = pair_count(state, a);
                for s2 in 0..shape.layer_sizes[h + 1] {
                    let m = triple_count(state, a, s2);
                    let p_bar = m as f64 / n.max(1) as f64;
                    let w = baseline_width(p_bar, n, state_count, shape.num_actions, total_episodes, delta);
                    set.set_interval(state, a, s2, Interval::clamped(p_bar - w, p_bar + w));
                }
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Step, Trajectory};

    #[test]
    fn baseline_width_edge_cases() {
        let l = (4.0 * 100.0 * 5.0 * 2.0 / 0.1f64).ln();
        // p_bar = 0, n = 2: the sqrt term vanishes, width = 14 L / 3.
        let w = baseline_width(0.0, 2, 5, 2, 100, 0.1);
        assert!((w - 14.0 * l / 3.0).abs() < 1e-12);
        // n = 1 and n = 0 clamp the denominator to 1.
        assert_eq!(baseline_width(0.0, 1, 5, 2, 100, 0.1), baseline_width(0.0, 0, 5, 2, 100, 0.1));
    }

    #[test]
    fn baseline_width_hand_value() {
        // p_bar = 0.5, N = 101, T = 1e3, |S| = 10, |A| = 2, delta = 0.1:
        // L = ln(8e5); width = 2 sqrt(0.5 L / 100) + 14 L / 300.
        let l = 800000.0f64.ln();
        let expected = 2.0 * (0.5 * l / 100.0).sqrt() + 14.0 * l / 300.0;
        let got = baseline_width(0.5, 101, 10, 2, 1000, 0.1);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.155_700_2).abs() < 1e-6, "{got}");
    }

    #[test]
    fn improved_halfwidth_1_hand_values() {
        // Clamp case: effective_n <= 1 and p_bar = 0 gives 20 L with L = ln(t / delta').
        let t = 100;
        let d = 0.01;
        let l = (t as f64 / d).ln();
        assert!((improved_halfwidth_1(0.0, 0, t, d) - 20.0 * l).abs() < 1e-12);
        // p_bar = 0.5, denominator = 100, L = 5: 4 sqrt(0.025) + 1.
        let d5 = t as f64 / 5f64.exp(); // contrive delta so ln(t/delta) = 5
        let hw = improved_halfwidth_1(0.5, 101, t, d5);
        assert!((hw - (4.0 * 0.025f64.sqrt() + 1.0)).abs() < 1e-9, "{hw}");
        assert!((hw - 1.632_455_53).abs() < 1e-7);
        // p_bar = 0.04, denominator = 400, L = 4: 4 sqrt(4e-4) + 20 * 4 / 400 = 0.28.
        let d4 = t as f64 / 4f64.exp();
        let hw = improved_halfwidth_1(0.04, 401, t, d4);
        assert!((hw - 0.28).abs() < 1e-9, "{hw}");
    }

    #[test]
    fn improved_width_2_hand_values() {
        let t = 50;
        // |S| = 4, ln term = 3, N = 41: (8 + 72) / 40 = 2.0 (clamps later).
        let d3 = t as f64 / 3f64.exp();
        assert!((improved_width_2(4, 41, t, d3) - 2.0).abs() < 1e-9);
        // N = 1001: (8 + 72) / 1000 = 0.08.
        assert!((improved_width_2(4, 1001, t, d3) - 0.08).abs() < 1e-9);
    }

    #[test]
    fn allocation_hand_values_and_summability() {
        let (d_sa, _) = allocate_confidence(3, 1, 2, 0.1);
        assert!((d_sa - 0.1 / 72.0).abs() < 1e-15);
        let (_, d_sas) = allocate_confidence(1, 2, 2, 0.1);
        assert!((d_sas - 0.1 / 136.0).abs() < 1e-15);

        // Numeric summability over a finite visited set: at most delta / 2
        // spent on each family.
        let delta = 0.3;
        let a_count = 3;
        let states = 40usize;
        let mut sum_sa = 0.0;
        let mut sum_sas = 0.0;
        for i in 1..=states {
            for _a in 0..a_count {
                sum_sa += allocate_confidence(i, 1, a_count, delta).0;
                for j in 1..=states {
                    sum_sas += allocate_confidence(i, j, a_count, delta).1;
                }
            }
        }
        assert!(sum_sa <= delta / 2.0, "{sum_sa}");
        assert!(sum_sas <= delta / 2.0, "{sum_sas}");
    }

    #[test]
    fn intersection_and_hull_fallback() {
        let a = Interval { lo: 0.2, hi: 0.6 };
        let b = Interval { lo: 0.0, hi: 0.5 };
        let (iv, fb) = a.intersect_or_hull(&b);
        assert!(!fb);
        assert_eq!(iv, Interval { lo: 0.2, hi: 0.5 });
        let c = Interval { lo: 0.7, hi: 0.9 };
        let (hull, fb) = a.intersect_or_hull(&c);
        assert!(fb);
        assert_eq!(hull, Interval { lo: 0.2, hi: 0.9 });
    }

    fn traj(start_action: usize, steps: &[(usize, usize)]) -> Trajectory {
        Trajectory {
            start_action,
            steps: steps.iter().map(|&(s, a)| Step { state: s, action: a, loss: 0.0 }).collect(),
        }
    }

    #[test]
    fn unvisited_pairs_get_the_full_interval() {
        let stats = VisitStats::new();
        let iv = improved_interval_1(&stats, State::new(1, 0), 0, State::new(2, 0), 5, 0.01);
        assert_eq!(iv, Interval::FULL);
        let iv = improved_interval_2(&stats, State::new(1, 0), 0, State::new(2, 0), 5, 0.01);
        assert_eq!(iv, Interval::FULL);
    }

    #[test]
    fn interval_2_requires_late_arrival() {
        let mut stats = VisitStats::new();
        // Both states arrive in the same episode: I2 is vacuous.
        stats.record_episode(&traj(0, &[(0, 0), (0, 0)]), 1).unwrap();
        let s = State::new(1, 0);
        let s2 = State::new(2, 0);
        assert_eq!(improved_interval_2(&stats, s, 0, s2, 3, 0.05), Interval::FULL);
        // A successor arriving only after many misses gets a genuine bound.
        for t in 2..=400 {
            stats.record_episode(&traj(0, &[(0, 0), (0, 0)]), t).unwrap();
        }
        stats.record_episode(&traj(0, &[(0, 0), (1, 0)]), 401).unwrap();
        let late = State::new(2, 1);
        let iv = improved_interval_2(&stats, s, 0, late, 401, 0.05);
        assert_eq!(iv.lo, 0.0);
        assert!(iv.hi < 1.0, "four hundred misses certify an upper bound, got {iv:?}");
    }

    #[test]
    fn improved_set_pins_aux_rows_and_slack() {
        use crate::pruned::PrunedSpace;
        let mut stats = VisitStats::new();
        for t in 1..=200 {
            let s2 = (t % 2) as usize;
            stats.record_episode(&traj(0, &[(0, 0), (s2, 0)]), t).unwrap();
        }
        let mut space = PrunedSpace::new(2, 2);
        space.admit(&[State::new(1, 0), State::new(2, 0)]);
        let set = build_improved_set(&stats, &space, 201, 0.1);
        // Auxiliary source rows are absorbing point masses.
        let aux1 = State::new(1, space.aux_index(1));
        for a in 0..2 {
            let row = set.row(aux1, a);
            assert_eq!(row[space.aux_index(2)], Interval::point(1.0));
            assert_eq!(row[0], Interval::point(0.0));
        }
        // Real rows end in a slack interval consistent with the real parts.
        let real = State::new(1, 0);
        let row = set.row(real, 0);
        let slack = row[space.aux_index(2)];
        assert!((slack.lo - (1.0 - row[0].hi).max(0.0)).abs() < 1e-12);
        assert!((slack.hi - (1.0 - row[0].lo).min(1.0)).abs() < 1e-12);
        assert!(set.row_feasible(real, 0));
        set.check_feasible().unwrap();
    }

    #[test]
    fn exact_set_contains_its_mdp_with_zero_width() {
        use crate::mdp::LayeredMdp;
        let shape = SpaceShape::new(vec![1, 2, 1], 2).unwrap();
        let rows = vec![
            vec![vec![vec![0.25, 0.75], vec![0.5, 0.5]]],
            vec![vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]],
        ];
        let mdp = LayeredMdp::new(shape, rows).unwrap();
        let set = TransitionConfidenceSet::exact(&mdp);
        assert!(set.contains_mdp(&mdp));
        assert_eq!(set.interval(State::new(0, 0), 0, 1).width(), 0.0);
    }
}
