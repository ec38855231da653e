//! Tabular episodic reinforcement learning without prior state-space
//! knowledge.
//!
//! The crate is built around a black-box reduction: a driver maintains a
//! pruned view of the world containing only states it has certified as
//! reachable (plus one absorbing auxiliary state per layer), runs an
//! off-the-shelf episodic learner on that pruned view, and rewrites real
//! trajectories into pruned ones before the learner sees them. Regret then
//! scales with the number of reachable states rather than with the ambient
//! state-space size.
//!
//! Module map:
//!
//! - [`mdp`] — layered MDPs, occupancy measures, exact comparators, sampling.
//! - [`pruned`] — the pruned space, pruned transitions/losses, trajectory
//!   rewriting, policy extension.
//! - [`reachability`] — visit statistics, arrival bookkeeping, the admission
//!   test, and supermartingale concentration checks.
//! - [`confidence`] — empirical-Bernstein transition confidence sets, both
//!   the classical construction and the arrival-time-allocated two-interval
//!   one that survives restarts.
//! - [`learners`] — episodic base learners behind one trait: optimistic
//!   value iteration (`ucbvi`) and occupancy-measure mirror descent
//!   (`uob_reps`).
//! - [`driver`] — the reduction loop itself.
//! - [`env`] — environment generators and the environment file format.
//! - [`experiment`] — experiment plans, CSV/JSON outputs.
//! - [`validate`] — executable validation suites over the statistical
//!   guarantees.
//!
//! See the `examples/` directory for one runnable walkthrough per major
//! capability, and the `statefree` binary for `run` / `sweep` / `validate`
//! subcommands.

pub mod confidence;
pub mod driver;
pub mod env;
pub mod error;
pub mod experiment;
pub mod learners;
pub mod mdp;
pub mod pruned;
pub mod reachability;
pub mod validate;

pub use error::{Error, Result};
pub use mdp::{
    best_in_hindsight, compute_occupancy, expected_loss, sample_trajectory, LayeredMdp, LossModel,
    OccupancyMeasure, Policy, SaTable, SpaceShape, State, Step, Trajectory,
};
pub use pruned::{build_pruned_transition, extend_policy, prune_trajectory, pruned_loss, PrunedSpace};
