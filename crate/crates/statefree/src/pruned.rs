//! The pruned world view: admitted states plus one absorbing auxiliary state
//! per layer.
//!
//! For each loss-bearing layer `h` the pruned space holds the set of admitted
//! real states and a single auxiliary state `aux_h` that stands in for every
//! other state of that layer. Transition mass from an admitted state to
//! non-admitted states is coalesced onto the auxiliary successor, auxiliary
//! states are absorbing under every action, and losses on auxiliary states
//! are zero. The resulting tuple is itself a well-defined [`LayeredMdp`], so
//! base learners run on it unchanged.
//!
//! Inside the pruned space, states are indexed contiguously: admitted states
//! come first in ascending full-space index order, the auxiliary state last.
//! A learner only ever sees pruned indices, so the identity of non-admitted
//! states never crosses the interface.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{LayeredMdp, Policy, SaTable, SpaceShape, State, Step, Trajectory};

/// Action label recorded on auxiliary steps of a pruned trajectory, and the
/// default action played on non-admitted states when extending a policy.
/// Auxiliary states are absorbing under every action, so the label choice is
/// behaviorally invisible; a fixed one keeps runs reproducible.
pub const AUX_ACTION: usize = 0;

/// The admitted-state bookkeeping. Admitted sets only grow; the version
/// counter bumps on every update so consumers can detect staleness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunedSpace {
    horizon: usize,
    num_actions: usize,
    /// Per layer `h = 1..=H` (at `admitted[h - 1]`): admitted full-space
    /// state indices, kept sorted ascending.
    admitted: Vec<Vec<usize>>,
    version: u64,
}

impl PrunedSpace {
    /// Empty pruned space: auxiliary states only.
    pub fn new(horizon: usize, num_actions: usize) -> Self {
        Self { horizon, num_actions, admitted: vec![Vec::new(); horizon], version: 0 }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Admitted full-space indices of layer `h`, ascending.
    pub fn admitted(&self, h: usize) -> &[usize] {
        &self.admitted[h - 1]
    }

    /// Is the full-space state admitted? Layer-0 and terminal states are
    /// structurally part of every space.
    pub fn contains(&self, s: State) -> bool {
        if s.layer == 0 || s.layer == self.horizon + 1 {
            return true;
        }
        self.admitted[s.layer - 1].binary_search(&s.index).is_ok()
    }

    /// Admit a batch of full-space states in one version bump. States already
    /// admitted are ignored. Returns the number of newly admitted states.
    pub fn admit(&mut self, states: &[State]) -> usize {
        let mut added = 0;
        for &s in states {
            assert!(
                s.layer >= 1 && s.layer <= self.horizon,
                "only loss-bearing layers hold admittable states"
            );
            let layer = &mut self.admitted[s.layer - 1];
            if let Err(pos) = layer.binary_search(&s.index) {
                layer.insert(pos, s.index);
                added += 1;
            }
        }
        if added > 0 {
            self.version += 1;
        }
        added
    }

    /// Number of admitted real states across all layers.
    pub fn admitted_count(&self) -> usize {
        self.admitted.iter().map(|l| l.len()).sum()
    }

    /// `|S_pruned|`: admitted states plus the `H` auxiliary states.
    pub fn state_count(&self) -> usize {
        self.admitted_count() + self.horizon
    }

    /// Pruned index of the auxiliary state of layer `h`.
    pub fn aux_index(&self, h: usize) -> usize {
        self.admitted[h - 1].len()
    }

    /// Size of pruned layer `h` (admitted + auxiliary).
    pub fn layer_size(&self, h: usize) -> usize {
        self.admitted[h - 1].len() + 1
    }

    /// Shape of the pruned space as a layered MDP.
    pub fn shape(&self) -> SpaceShape {
        let mut sizes = Vec::with_capacity(self.horizon + 2);
        sizes.push(1);
        for h in 1..=self.horizon {
            sizes.push(self.layer_size(h));
        }
        sizes.push(1);
        SpaceShape::new(sizes, self.num_actions).expect("pruned shape is always valid")
    }

    /// Map a full-space state to its pruned index (layers `1..=H`); `None`
    /// if not admitted.
    pub fn pruned_index(&self, s: State) -> Option<usize> {
        if s.layer == 0 || s.layer == self.horizon + 1 {
            return Some(0);
        }
        self.admitted[s.layer - 1].binary_search(&s.index).ok()
    }

    /// Map a pruned index back to the full-space index; `None` for the
    /// auxiliary state.
    pub fn full_index(&self, layer: usize, pruned_index: usize) -> Option<usize> {
        if layer == 0 || layer == self.horizon + 1 {
            return Some(0);
        }
        self.admitted[layer - 1].get(pruned_index).copied()
    }

    pub fn is_aux(&self, layer: usize, pruned_index: usize) -> bool {
        layer >= 1 && layer <= self.horizon && pruned_index == self.aux_index(layer)
    }
}

/// Build the pruned transition as a layered MDP over the pruned space.
///
/// Rows follow the three-case definition: admitted-to-admitted entries equal
/// the true transition probabilities, the auxiliary successor absorbs the
/// remaining mass, and auxiliary sources are absorbing onto the next
/// auxiliary state under every action. Used by validation and tests only;
/// the learner experiences this transition implicitly through pruned
/// trajectories.
pub fn build_pruned_transition(mdp: &LayeredMdp, space: &PrunedSpace) -> Result<LayeredMdp> {
    if space.horizon() != mdp.horizon() || space.num_actions() != mdp.num_actions() {
        return Err(Error::Config("pruned space does not match the MDP shape".into()));
    }
    for h in 1..=space.horizon() {
        if let Some(&max) = space.admitted(h).last() {
            if max >= mdp.layer_size(h) {
                return Err(Error::Config(format!(
                    "admitted state {max} does not exist in layer {h} of the MDP"
                )));
            }
        }
    }
    let horizon = mdp.horizon();
    let shape = space.shape();
    let mut rows: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(horizon + 1);
    for h in 0..=horizon {
        let source_count = shape.layer_sizes[h];
        let succ_count = shape.layer_sizes[h + 1];
        let mut layer_rows = Vec::with_capacity(source_count);
        for sp in 0..source_count {
            let mut state_rows = Vec::with_capacity(mdp.num_actions());
            for a in 0..mdp.num_actions() {
                let row = if h >= 1 && space.is_aux(h, sp) {
                    // Absorbing: point mass on the next auxiliary state (or
                    // the terminal at the last layer).
                    let mut r = vec![0.0; succ_count];
                    let target = if h == horizon { 0 } else { space.aux_index(h + 1) };
                    r[target] = 1.0;
                    r
                } else {
                    let full = space
                        .full_index(h, sp)
                        .expect("non-auxiliary pruned index maps to a full state");
                    let true_row = mdp.row(State::new(h, full), a);
                    if h == horizon {
                        vec![1.0]
                    } else {
                        let mut r = vec![0.0; succ_count];
                        let mut admitted_mass = 0.0;
                        for (next_pruned, &next_full) in space.admitted(h + 1).iter().enumerate() {
                            let p = true_row[next_full];
                            r[next_pruned] = p;
                            admitted_mass += p;
                        }
                        r[space.aux_index(h + 1)] = (1.0 - admitted_mass).max(0.0);
                        r
                    }
                };
                state_rows.push(row);
            }
            layer_rows.push(state_rows);
        }
        rows.push(layer_rows);
    }
    LayeredMdp::new(shape, rows)
}

/// Rewrite a full-space trajectory into the pruned space.
///
/// Let `h*` be the largest `h` such that the visited states at layers
/// `1..=h` are all admitted. Steps up to `h*` keep their action and loss,
/// with states mapped to pruned indices; every later step becomes
/// `(aux_h, AUX_ACTION, 0)`.
pub fn prune_trajectory(o: &Trajectory, space: &PrunedSpace) -> Trajectory {
    let mut steps = Vec::with_capacity(o.steps.len());
    let mut inside = true;
    for (i, step) in o.steps.iter().enumerate() {
        let h = i + 1;
        let pruned = if inside { space.pruned_index(State::new(h, step.state)) } else { None };
        match pruned {
            Some(idx) if inside => {
                steps.push(Step { state: idx, action: step.action, loss: step.loss });
            }
            _ => {
                inside = false;
                steps.push(Step { state: space.aux_index(h), action: AUX_ACTION, loss: 0.0 });
            }
        }
    }
    Trajectory { start_action: o.start_action, steps }
}

/// Extend a policy over the pruned space to the full space: admitted states
/// copy their pruned rows, non-admitted states deterministically play
/// [`AUX_ACTION`].
pub fn extend_policy(
    pruned_policy: &Policy,
    space: &PrunedSpace,
    full_shape: &SpaceShape,
) -> Result<Policy> {
    if full_shape.horizon() != space.horizon() || full_shape.num_actions != space.num_actions() {
        return Err(Error::Config("pruned space does not match the full shape".into()));
    }
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(full_shape.horizon() + 1);
    rows.push(vec![pruned_policy.row(State::new(0, 0)).to_vec()]);
    for h in 1..=full_shape.horizon() {
        let mut layer = Vec::with_capacity(full_shape.layer_sizes[h]);
        for s in 0..full_shape.layer_sizes[h] {
            let row = match space.pruned_index(State::new(h, s)) {
                Some(idx) => pruned_policy.row(State::new(h, idx)).to_vec(),
                None => {
                    let mut r = vec![0.0; full_shape.num_actions];
                    r[AUX_ACTION] = 1.0;
                    r
                }
            };
            layer.push(row);
        }
        rows.push(layer);
    }
    Policy::new(rows)
}

/// Restrict a full-space policy to the pruned space: admitted states copy
/// their rows; auxiliary states play [`AUX_ACTION`] deterministically, the
/// canonical choice that makes pruned trajectory distributions well-defined.
pub fn restrict_policy(full_policy: &Policy, space: &PrunedSpace) -> Policy {
    let shape = space.shape();
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(shape.horizon() + 1);
    rows.push(vec![full_policy.row(State::new(0, 0)).to_vec()]);
    for h in 1..=shape.horizon() {
        let mut layer = Vec::with_capacity(shape.layer_sizes[h]);
        for sp in 0..shape.layer_sizes[h] {
            let row = match space.full_index(h, sp) {
                Some(full) => full_policy.row(State::new(h, full)).to_vec(),
                None => {
                    let mut r = vec![0.0; shape.num_actions];
                    r[AUX_ACTION] = 1.0;
                    r
                }
            };
            layer.push(row);
        }
        rows.push(layer);
    }
    Policy::new(rows).expect("restricted rows are normalized")
}

/// Force auxiliary-state rows of a pruned-space policy to the canonical
/// point mass on [`AUX_ACTION`]. Behaviorally invisible (auxiliary states
/// are absorbing), but it pins down recorded actions.
pub fn canonicalize_aux_rows(policy: &Policy, space: &PrunedSpace) -> Policy {
    let mut out = policy.clone();
    for h in 1..=space.horizon() {
        let mut row = vec![0.0; space.num_actions()];
        row[AUX_ACTION] = 1.0;
        out.set_row(State::new(h, space.aux_index(h)), row);
    }
    out
}

/// Loss table over the pruned space: admitted entries copy the full table,
/// auxiliary states have zero loss.
pub fn pruned_loss(loss: &SaTable, space: &PrunedSpace) -> SaTable {
    let shape = space.shape();
    let mut out = SaTable::zeros(&shape);
    for h in 1..=space.horizon() {
        for (pruned_idx, &full_idx) in space.admitted(h).iter().enumerate() {
            for a in 0..space.num_actions() {
                out.set(State::new(h, pruned_idx), a, loss.get(State::new(h, full_idx), a));
            }
        }
    }
    out
}
