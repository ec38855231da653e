//! Occupancy polytopes over a confidence set: feasible points, KL
//! projections, and upper occupancy bounds.
//!
//! For a layered shape and a per-row interval set, the polytope is
//!
//! ```text
//! { q >= 0 :  sum_{a,s'} q(s0,a,s') = 1,
//!             inflow(s) = outflow(s)                   for interior s,
//!             lo(s'|s,a) n(s,a) <= q(s,a,s') <= hi(s'|s,a) n(s,a) }
//! ```
//!
//! with `n(s,a) = sum_{s'} q(s,a,s')`. Equivalently: occupancy measures of
//! `(policy, transition)` pairs whose transition rows lie in the intervals.
//!
//! The KL projection `argmin_{q in polytope} sum q ln(q / w)` is solved
//! through its Lagrangian dual. For fixed multipliers on the interval
//! constraints, the inner problem over the base polytope (normalization plus
//! flow) has a closed-form stationary family `q = w~ * x(s') / x(s)`, and
//! each `x(s)` admits an exact coordinate update; Gauss-Seidel sweeps drive
//! the flow residual down. The interval multipliers are then raised by
//! projected gradient ascent with a safeguarded step. Entries whose implied
//! upper bound is zero are excluded from the support up front, which keeps
//! the dual bounded.

use serde::{Deserialize, Serialize};

use crate::confidence::TransitionConfidenceSet;
use crate::error::{Error, Result};
use crate::mdp::{Policy, SpaceShape, State};

/// A nonnegative table over transition triples `(h, s, a, s')`, `h = 0..=H`.
/// The occupancy iterates of mirror-descent learners live here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OccTriples {
    shape: SpaceShape,
    vals: Vec<Vec<Vec<Vec<f64>>>>,
}

impl OccTriples {
    pub fn zeros(shape: &SpaceShape) -> Self {
        let vals = (0..=shape.horizon())
            .map(|h| {
                vec![vec![vec![0.0; shape.layer_sizes[h + 1]]; shape.num_actions]; shape.layer_sizes[h]]
            })
            .collect();
        Self { shape: shape.clone(), vals }
    }

    pub fn shape(&self) -> &SpaceShape {
        &self.shape
    }

    pub fn get(&self, s: State, a: usize, next_index: usize) -> f64 {
        self.vals[s.layer][s.index][a][next_index]
    }

    pub fn set(&mut self, s: State, a: usize, next_index: usize, v: f64) {
        self.vals[s.layer][s.index][a][next_index] = v;
    }

    /// `n(s, a) = sum_{s'} q(s, a, s')`.
    pub fn pair_marginal(&self, s: State, a: usize) -> f64 {
        self.vals[s.layer][s.index][a].iter().sum()
    }

    /// `n(s) = sum_{a, s'} q(s, a, s')`.
    pub fn state_marginal(&self, s: State) -> f64 {
        self.vals[s.layer][s.index].iter().map(|row| row.iter().sum::<f64>()).sum()
    }

    /// Extract the policy `pi(a|s) = n(s, a) / n(s)`, uniform where the
    /// state carries no mass.
    pub fn policy(&self) -> Policy {
        let shape = &self.shape;
        let rows = (0..=shape.horizon())
            .map(|h| {
                (0..shape.layer_sizes[h])
                    .map(|s| {
                        let state = State::new(h, s);
                        let total = self.state_marginal(state);
                        if total > 0.0 {
                            (0..shape.num_actions)
                                .map(|a| self.pair_marginal(state, a) / total)
                                .collect()
                        } else {
                            vec![1.0 / shape.num_actions as f64; shape.num_actions]
                        }
                    })
                    .collect()
            })
            .collect();
        Policy::new(rows).expect("marginal rows are normalized")
    }

    /// Largest violation of the polytope constraints: normalization, flow
    /// conservation, and the interval constraints of `set`.
    pub fn feasibility_violation(&self, set: &TransitionConfidenceSet) -> f64 {
        let shape = &self.shape;
        let horizon = shape.horizon();
        let mut worst: f64 = 0.0;
        let layer0: f64 = (0..shape.num_actions)
            .map(|a| self.pair_marginal(State::new(0, 0), a))
            .sum();
        worst = worst.max((layer0 - 1.0).abs());
        for h in 1..=horizon {
            for s in 0..shape.layer_sizes[h] {
                let state = State::new(h, s);
                let inflow: f64 = (0..shape.layer_sizes[h - 1])
                    .flat_map(|sp| (0..shape.num_actions).map(move |a| (sp, a)))
                    .map(|(sp, a)| self.get(State::new(h - 1, sp), a, s))
                    .sum();
                worst = worst.max((inflow - self.state_marginal(state)).abs());
            }
        }
        for h in 0..=horizon {
            for s in 0..shape.layer_sizes[h] {
                let state = State::new(h, s);
                for a in 0..shape.num_actions {
                    let n = self.pair_marginal(state, a);
                    for s2 in 0..shape.layer_sizes[h + 1] {
                        let iv = set.interval(state, a, s2);
                        let q = self.get(state, a, s2);
                        worst = worst.max(iv.lo * n - q).max(q - iv.hi * n);
                    }
                }
            }
        }
        worst
    }
}

/// A transition function with every row inside the set's intervals, placed
/// strictly inside wherever the intervals leave room: lower bounds first,
/// leftover mass spread proportionally to the interval widths.
pub fn interior_transition_rows(set: &TransitionConfidenceSet) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    let shape = set.shape();
    let mut rows = Vec::with_capacity(shape.horizon() + 1);
    for h in 0..=shape.horizon() {
        let mut layer = Vec::with_capacity(shape.layer_sizes[h]);
        for s in 0..shape.layer_sizes[h] {
            let state = State::new(h, s);
            let mut per_action = Vec::with_capacity(shape.num_actions);
            for a in 0..shape.num_actions {
                let ivs = set.row(state, a);
                let lo_sum: f64 = ivs.iter().map(|iv| iv.lo).sum();
                let cap_sum: f64 = ivs.iter().map(|iv| iv.width()).sum();
                let slack = 1.0 - lo_sum;
                if slack < -1e-9 || slack > cap_sum + 1e-9 {
                    return Err(Error::ConfidenceInconsistency(format!(
                        "row (layer {h}, state {s}, action {a}) admits no probability vector"
                    )));
                }
            let ratio = if cap_sum > 0.0 { (slack / cap_sum).clamp(0.0, 1.0) } else { 0.0 };
                let mut row: Vec<f64> =
                    ivs.iter().map(|iv| iv.lo + iv.width() * ratio).collect();
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|p| *p /= total);
                }
                per_action.push(row);
            }
            layer.push(per_action);
        }
        rows.push(layer);
    }
    Ok(rows)
}

/// Occupancy of `(policy, rows)` as a triple table, by forward recursion.
pub fn occupancy_of(shape: &SpaceShape, policy: &Policy, rows: &[Vec<Vec<Vec<f64>>>]) -> OccTriples {
    let mut q = OccTriples::zeros(shape);
    let mut dist = vec![1.0];
    for h in 0..=shape.horizon() {
        let mut next = vec![0.0; shape.layer_sizes[h + 1]];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let state = State::new(h, s);
            for a in 0..shape.num_actions {
                let pa = mass * policy.prob(state, a);
                if pa == 0.0 {
                    continue;
                }
                for (s2, &p) in rows[h][s][a].iter().enumerate() {
                    if p > 0.0 {
                        q.set(state, a, s2, pa * p);
                        next[s2] += pa * p;
                    }
                }
            }
        }
        dist = next;
    }
    q
}

/// Interior point of the polytope: uniform policy over an interior feasible
/// transition.
pub fn interior_occupancy(set: &TransitionConfidenceSet) -> Result<OccTriples> {
    let shape = set.shape();
    let rows = interior_transition_rows(set)?;
    Ok(occupancy_of(shape, &Policy::uniform(shape), &rows))
}

// ---------------------------------------------------------------------------
// Upper occupancy bounds
// ---------------------------------------------------------------------------

/// Maximize `sum_i p_i g_i` over probability vectors with `p_i` inside the
/// row's intervals: everything starts at its lower bound and the remaining
/// mass goes to successors in decreasing `g` order.
fn row_max(ivs: &[crate::confidence::Interval], g: &[f64]) -> Result<f64> {
    let lo_sum: f64 = ivs.iter().map(|iv| iv.lo).sum();
    let hi_sum: f64 = ivs.iter().map(|iv| iv.hi).sum();
    if lo_sum > 1.0 + 1e-9 || hi_sum < 1.0 - 1e-9 {
        return Err(Error::ConfidenceInconsistency(
            "interval row admits no probability vector".into(),
        ));
    }
    let mut value: f64 = ivs.iter().zip(g).map(|(iv, &gi)| iv.lo * gi).sum();
    let mut budget = (1.0 - lo_sum).max(0.0);
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&i, &j| g[j].partial_cmp(&g[i]).unwrap());
    for i in order {
        if budget <= 0.0 {
            break;
        }
        let take = ivs[i].width().min(budget);
        value += take * g[i];
        budget -= take;
    }
    Ok(value)
}

/// `max_{P in set} P(visit target | policy)`: backward recursion from the
/// target's layer with a per-row greedy maximization. Exact because the
/// interval constraints are rectangular across rows.
pub fn max_reach(set: &TransitionConfidenceSet, policy: &Policy, target: State) -> Result<f64> {
    let shape = set.shape();
    if target.layer == 0 {
        return Ok(1.0);
    }
    let mut g = vec![0.0; shape.layer_sizes[target.layer]];
    g[target.index] = 1.0;
    for h in (0..target.layer).rev() {
        let mut next = vec![0.0; shape.layer_sizes[h]];
        for s in 0..shape.layer_sizes[h] {
            let state = State::new(h, s);
            let mut v = 0.0;
            for a in 0..shape.num_actions {
                let pa = policy.prob(state, a);
                if pa > 0.0 {
                    v += pa * row_max(set.row(state, a), &g)?;
                }
            }
            next[s] = v;
        }
        g = next;
    }
    Ok(g[0].clamp(0.0, 1.0))
}

/// Upper occupancy bound `u(s, a) = pi(a|s) * max_{P in set} q^{P, pi}(s)`.
pub fn upper_occupancy(
    set: &TransitionConfidenceSet,
    policy: &Policy,
    s: State,
    a: usize,
) -> Result<f64> {
    Ok(policy.prob(s, a) * max_reach(set, policy, s)?)
}

// ---------------------------------------------------------------------------
// KL projection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ProjectionOptions {
    /// Cap on interval-multiplier ascent iterations.
    pub max_outer: usize,
    /// Cap on Gauss-Seidel sweeps per inner solve.
    pub max_inner_sweeps: usize,
    /// Flow/normalization residual target for inner solves.
    pub inner_tol: f64,
    /// KKT residual target (feasibility and complementary slackness).
    pub kkt_tol: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self { max_outer: 10_000, max_inner_sweeps: 200, inner_tol: 1e-9, kkt_tol: 1e-8 }
    }
}

/// Over-relaxation factor of the inner flow solve.
const OVER_RELAXATION: f64 = 1.5;

/// Convergence report of a projection.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub outer_iterations: usize,
    pub inner_sweeps: usize,
    pub kkt_residual: f64,
}

/// Reusable multiplier state; warm-starting across consecutive projections
/// of slowly-moving iterates cuts the outer loop drastically.
#[derive(Debug, Clone, Default)]
pub struct ProjectionWarmStart {
    mu_plus: Vec<f64>,
    mu_minus: Vec<f64>,
    log_x: Vec<Vec<f64>>,
}

struct Workspace<'a> {
    shape: SpaceShape,
    set: &'a TransitionConfidenceSet,
    /// Flattened triple indexing: id -> (h, s, a, s').
    triples: Vec<(usize, usize, usize, usize)>,
    /// (h, s, a) -> flat id of the row's first triple; rows are contiguous.
    row_start: Vec<Vec<Vec<usize>>>,
    /// Support mask from implied upper bounds.
    support: Vec<bool>,
    /// States reachable through the support, per layer.
    alive: Vec<Vec<bool>>,
    log_w: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(weights: &OccTriples, set: &'a TransitionConfidenceSet) -> Self {
        let shape = weights.shape().clone();
        let horizon = shape.horizon();
        let mut triples = Vec::new();
        let mut row_start = Vec::with_capacity(horizon + 1);
        for h in 0..=horizon {
            let mut layer = Vec::with_capacity(shape.layer_sizes[h]);
            for s in 0..shape.layer_sizes[h] {
                let mut per_action = Vec::with_capacity(shape.num_actions);
                for a in 0..shape.num_actions {
                    per_action.push(triples.len());
                    for s2 in 0..shape.layer_sizes[h + 1] {
                        triples.push((h, s, a, s2));
                    }
                }
                layer.push(per_action);
            }
            row_start.push(layer);
        }

        // Implied upper bound of an entry: min(hi, 1 - sum of the other lower
        // bounds). Entries at or below zero are excluded from the support.
        let mut support = vec![false; triples.len()];
        for h in 0..=horizon {
            for s in 0..shape.layer_sizes[h] {
                let state = State::new(h, s);
                for a in 0..shape.num_actions {
                    let ivs = set.row(state, a);
                    let lo_sum: f64 = ivs.iter().map(|iv| iv.lo).sum();
                    let base = row_start[h][s][a];
                    for (s2, iv) in ivs.iter().enumerate() {
                        let implied = iv.hi.min(1.0 - (lo_sum - iv.lo));
                        support[base + s2] = implied > 1e-15;
                    }
                }
            }
        }

        // Forward reachability through the support.
        let mut alive: Vec<Vec<bool>> = (0..=horizon + 1)
            .map(|h| vec![false; shape.layer_sizes[h]])
            .collect();
        alive[0][0] = true;
        for h in 0..=horizon {
            for s in 0..shape.layer_sizes[h] {
                if !alive[h][s] {
                    continue;
                }
                for a in 0..shape.num_actions {
                    let base = row_start[h][s][a];
                    for s2 in 0..shape.layer_sizes[h + 1] {
                        if support[base + s2] {
                            alive[h + 1][s2] = true;
                        }
                    }
                }
            }
        }
        // Entries from or into dead states carry no mass.
        for (id, &(h, s, _a, s2)) in triples.iter().enumerate() {
            if !alive[h][s] || !alive[h + 1][s2] {
                support[id] = false;
            }
        }

        let log_w: Vec<f64> = triples
            .iter()
            .enumerate()
            .map(|(id, &(h, s, a, s2))| {
                if support[id] {
                    let w = weights.get(State::new(h, s), a, s2);
                    if w > 0.0 {
                        w.ln()
                    } else {
                        // Feasible-but-unweighted entries get a hard floor so
                        // they stay representable; they carry ~no mass.
                        f64::MIN_POSITIVE.ln()
                    }
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();

        Self { shape, set, triples, row_start, support, alive, log_w }
    }

    fn id(&self, h: usize, s: usize, a: usize, s2: usize) -> usize {
        self.row_start[h][s][a] + s2
    }
}

/// KL-project `weights` onto the occupancy polytope of `set`:
/// `argmin_q sum q ln(q / weights)` subject to the polytope constraints.
pub fn kl_project(
    weights: &OccTriples,
    set: &TransitionConfidenceSet,
    opts: &ProjectionOptions,
    warm: &mut ProjectionWarmStart,
    stats: &mut ProjectionStats,
) -> Result<OccTriples> {
    let shape = weights.shape().clone();
    if set.shape() != &shape {
        return Err(Error::Config("confidence set does not match the iterate shape".into()));
    }
    set.check_feasible()?;
    let ws = Workspace::new(weights, set);
    let n_triples = ws.triples.len();

    let horizon = shape.horizon();
    let x_shape: Vec<usize> = (1..=horizon).map(|h| shape.layer_sizes[h]).collect();
    if warm.mu_plus.len() != n_triples
        || warm.log_x.len() != x_shape.len()
        || warm.log_x.iter().map(Vec::len).ne(x_shape.iter().copied())
    {
        warm.mu_plus = vec![0.0; n_triples];
        warm.mu_minus = vec![0.0; n_triples];
        warm.log_x = x_shape.iter().map(|&n| vec![0.0; n]).collect();
    }
    let mut mu_plus = warm.mu_plus.clone();
    let mut mu_minus = warm.mu_minus.clone();

    // log x(s) for interior layers; the terminal is fixed at 0.
    let mut log_x = warm.log_x.clone();

    let mut q = vec![0.0; n_triples];
    let mut total_sweeps = 0usize;

    // Evaluate the dual at the current multipliers: inner Gauss-Seidel solve
    // over (nu, x), then q and the dual value -sum(q) + ln(nu) + 1.
    let solve_inner = |mu_plus: &[f64],
                       mu_minus: &[f64],
                       log_x: &mut Vec<Vec<f64>>,
                       q: &mut Vec<f64>,
                       sweeps_used: &mut usize|
     -> f64 {
        // Per-triple exponent from the interval multipliers.
        let mut log_wt = ws.log_w.clone();
        for h in 0..=horizon {
            for s in 0..shape.layer_sizes[h] {
                if !ws.alive[h][s] {
                    continue;
                }
                for a in 0..shape.num_actions {
                    let base = ws.row_start[h][s][a];
                    let succ = shape.layer_sizes[h + 1];
                    let mut row_shift = 0.0;
                    for s2 in 0..succ {
                        let iv = ws.set.interval(State::new(h, s), a, s2);
                        row_shift += mu_plus[base + s2] * iv.hi - mu_minus[base + s2] * iv.lo;
                    }
                    for s2 in 0..succ {
                        let id = base + s2;
                        if ws.support[id] {
                            log_wt[id] += -(mu_plus[id] - mu_minus[id]) + row_shift;
                        }
                    }
                }
            }
        }

        let log_z = |h2: usize, s2: usize, log_x: &Vec<Vec<f64>>| -> f64 {
            if h2 <= horizon {
                log_x[h2 - 1][s2]
            } else {
                0.0
            }
        };

        let mut log_nu = 0.0;
        let mut residual = f64::INFINITY;
        let mut sweep = 0;
        while sweep < opts.max_inner_sweeps && residual > opts.inner_tol {
            sweep += 1;
            // Normalization: nu = 1 / sum_a sum_s' wt(0,0,a,s') z(s').
            let mut z0 = f64::NEG_INFINITY;
            for a in 0..shape.num_actions {
                let base = ws.row_start[0][0][a];
                for s2 in 0..shape.layer_sizes[1] {
                    let id = base + s2;
                    if ws.support[id] {
                        let term = log_wt[id] + log_z(1, s2, log_x);
                        z0 = logsumexp2(z0, term);
                    }
                }
            }
            log_nu = -z0;

            // Coordinate updates layer by layer.
            for h in 1..=horizon {
                for s in 0..shape.layer_sizes[h] {
                    if !ws.alive[h][s] {
                        continue;
                    }
                    // Outgoing weight O(s) = sum wt(h,s,a,s') z(s').
                    let mut log_o = f64::NEG_INFINITY;
                    for a in 0..shape.num_actions {
                        let base = ws.row_start[h][s][a];
                        for s2 in 0..shape.layer_sizes[h + 1] {
                            let id = base + s2;
                            if ws.support[id] {
                                log_o = logsumexp2(log_o, log_wt[id] + log_z(h + 1, s2, log_x));
                            }
                        }
                    }
                    // Incoming weight I(s) = sum wt(h-1,sp,a,s) y(sp).
                    let mut log_i = f64::NEG_INFINITY;
                    for sp in 0..shape.layer_sizes[h - 1] {
                        if !ws.alive[h - 1][sp] {
                            continue;
                        }
                        let log_y =
                            if h == 1 { log_nu } else { -log_x[h - 2][sp] };
                        for a in 0..shape.num_actions {
                            let id = ws.id(h - 1, sp, a, s);
                            if ws.support[id] {
                                log_i = logsumexp2(log_i, log_wt[id] + log_y);
                            }
                        }
                    }
                    if log_o.is_finite() && log_i.is_finite() {
                        // Over-relaxed fixed-point step: the plain update
                        // contracts at about 1/2 per sweep on layered
                        // chains, so pushing past it converges much faster.
                        let update = 0.5 * (log_o - log_i);
                        let old = log_x[h - 1][s];
                        log_x[h - 1][s] = old + OVER_RELAXATION * (update - old);
                    }
                }
            }

            // Residual: rebuild q and measure constraint violations.
            residual = rebuild_q(&ws, &log_wt, log_nu, log_x, q);
        }
        *sweeps_used += sweep;
        let total: f64 = q.iter().sum();
        -total + log_nu + 1.0
    };

    let _ = solve_inner(&mu_plus, &mu_minus, &mut log_x, &mut q, &mut total_sweeps);
    let mut outer = 0;
    loop {
        // KKT residuals at the current primal candidate.
        let mut violation: f64 = 0.0;
        let mut comp_slack: f64 = 0.0;
        for h in 0..=horizon {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..shape.num_actions {
                    let base = ws.row_start[h][s][a];
                    let succ = shape.layer_sizes[h + 1];
                    let n: f64 = (0..succ).map(|s2| q[base + s2]).sum();
                    for s2 in 0..succ {
                        let id = base + s2;
                        let iv = ws.set.interval(State::new(h, s), a, s2);
                        let g_hi = q[id] - iv.hi * n;
                        let g_lo = iv.lo * n - q[id];
                        violation = violation.max(g_hi).max(g_lo);
                        comp_slack = comp_slack.max(mu_plus[id] * g_hi.abs());
                        comp_slack = comp_slack.max(mu_minus[id] * g_lo.abs());
                    }
                }
            }
        }
        let eq_residual = flow_residual(&ws, &q);
        let kkt = violation.max(comp_slack).max(eq_residual);
        if kkt <= opts.kkt_tol {
            stats.outer_iterations = outer;
            stats.inner_sweeps = total_sweeps;
            stats.kkt_residual = kkt;
            break;
        }
        outer += 1;
        if outer > opts.max_outer {
            return Err(Error::Numerical(format!(
                "projection did not reach KKT residual {} within {} iterations \
                 (violation {violation:.3e}, complementary slackness {comp_slack:.3e}, \
                 flow residual {eq_residual:.3e})",
                opts.kkt_tol, opts.max_outer
            )));
        }

        // Exact coordinate maximization over the interval multipliers, one
        // row at a time. Rows are independent given the flow multipliers:
        // a row's multipliers only rescale that row's entries, so the
        // 1-D optimum has a closed form. Values of q are refreshed in place;
        // the flow multipliers are re-solved afterwards. A few passes per
        // round settle the within-row interactions.
        for _pass in 0..4 {
        for h in 0..=horizon {
            for s in 0..shape.layer_sizes[h] {
                if !ws.alive[h][s] {
                    continue;
                }
                for a in 0..shape.num_actions {
                    let base = ws.row_start[h][s][a];
                    let succ = shape.layer_sizes[h + 1];
                    for s2 in 0..succ {
                        let id = base + s2;
                        let iv = ws.set.interval(State::new(h, s), a, s2);
                        let row_sum = |q: &[f64]| -> f64 {
                            (0..succ).map(|j| q[base + j]).sum()
                        };

                        // Upper constraint q_i <= hi * n.
                        let a_val = q[id];
                        let b_val = row_sum(&q) - a_val;
                        let target = if iv.hi >= 1.0 - 1e-12 || a_val <= 0.0 || b_val <= 1e-300 {
                            0.0
                        } else {
                            let d = ((1.0 - iv.hi) * a_val / (iv.hi * b_val)).ln();
                            (mu_plus[id] + d).max(0.0)
                        };
                        let applied = (target - mu_plus[id]).clamp(-500.0, 500.0);
                        if applied != 0.0 {
                            mu_plus[id] += applied;
                            let fi = (-applied * (1.0 - iv.hi)).exp();
                            let fj = (applied * iv.hi).exp();
                            for j in 0..succ {
                                let jd = base + j;
                                q[jd] *= if jd == id { fi } else { fj };
                            }
                        }

                        // Lower constraint lo * n <= q_i.
                        let a_val = q[id];
                        let b_val = row_sum(&q) - a_val;
                        let target = if iv.lo <= 1e-15
                            || iv.lo >= 1.0 - 1e-12
                            || a_val <= 0.0
                            || b_val <= 1e-300
                        {
                            0.0
                        } else {
                            let d = (iv.lo * b_val / ((1.0 - iv.lo) * a_val)).ln();
                            (mu_minus[id] + d).max(0.0)
                        };
                        let applied = (target - mu_minus[id]).clamp(-500.0, 500.0);
                        if applied != 0.0 {
                            mu_minus[id] += applied;
                            let fi = (applied * (1.0 - iv.lo)).exp();
                            let fj = (-applied * iv.lo).exp();
                            for j in 0..succ {
                                let jd = base + j;
                                q[jd] *= if jd == id { fi } else { fj };
                            }
                        }
                    }
                }
            }
        }
        }
        let _ = solve_inner(&mu_plus, &mu_minus, &mut log_x, &mut q, &mut total_sweeps);
    }

    warm.mu_plus = mu_plus;
    warm.mu_minus = mu_minus;
    warm.log_x = log_x;

    let mut out = OccTriples::zeros(&shape);
    for (id, &(h, s, a, s2)) in ws.triples.iter().enumerate() {
        out.set(State::new(h, s), a, s2, q[id]);
    }
    Ok(out)
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Rebuild the primal candidate from the dual variables; returns the
/// equality residual (normalization plus flow).
fn rebuild_q(
    ws: &Workspace,
    log_wt: &[f64],
    log_nu: f64,
    log_x: &Vec<Vec<f64>>,
    q: &mut [f64],
) -> f64 {
    let shape = &ws.shape;
    let horizon = shape.horizon();
    for (id, &(h, s, _a, s2)) in ws.triples.iter().enumerate() {
        if !ws.support[id] {
            q[id] = 0.0;
            continue;
        }
        let log_y = if h == 0 { log_nu } else { -log_x[h - 1][s] };
        let log_z = if h + 1 <= horizon { log_x[h][s2] } else { 0.0 };
        q[id] = (log_wt[id] + log_y + log_z).exp();
    }
    flow_residual(ws, q)
}

fn flow_residual(ws: &Workspace, q: &[f64]) -> f64 {
    let shape = &ws.shape;
    let horizon = shape.horizon();
    let mut worst: f64 = 0.0;
    let mut mass0 = 0.0;
    for a in 0..shape.num_actions {
        let base = ws.row_start[0][0][a];
        for s2 in 0..shape.layer_sizes[1] {
            mass0 += q[base + s2];
        }
    }
    worst = worst.max((mass0 - 1.0).abs());
    for h in 1..=horizon {
        for s in 0..shape.layer_sizes[h] {
            let mut inflow = 0.0;
            for sp in 0..shape.layer_sizes[h - 1] {
                for a in 0..shape.num_actions {
                    inflow += q[ws.id(h - 1, sp, a, s)];
                }
            }
            let mut outflow = 0.0;
            for a in 0..shape.num_actions {
                let base = ws.row_start[h][s][a];
                for s2 in 0..shape.layer_sizes[h + 1] {
                    outflow += q[base + s2];
                }
            }
            worst = worst.max((inflow - outflow).abs());
        }
    }
    worst
}
