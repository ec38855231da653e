//! Episodic base learners behind a single black-box interface.
//!
//! A learner lives on a layered state/action shape it is handed at restart
//! time, proposes one policy per episode, and consumes the episode's
//! trajectory afterwards. It knows nothing about how its world relates to a
//! larger one; the reduction driver restarts it whenever that world grows.
//! Learners that can exploit an externally built transition confidence set
//! accept one through [`EpisodicLearner::inject_confidence_set`].

mod polytope;
mod ucbvi;
mod uob_reps;

pub use polytope::{
    interior_occupancy, interior_transition_rows, kl_project, max_reach, occupancy_of,
    upper_occupancy, OccTriples, ProjectionOptions, ProjectionStats, ProjectionWarmStart,
};
pub use ucbvi::{bonus_arrival, bonus_standard, BonusRule, Ucbvi, UcbviConfig};
pub use uob_reps::{adaptive_rate, loss_estimate, UobReps, UobRepsConfig};

use serde::{Deserialize, Serialize};

use crate::confidence::TransitionConfidenceSet;
use crate::error::{Error, Result};
use crate::mdp::{Policy, SpaceShape, Trajectory};

/// Everything a learner is told when (re)started on a fresh state space.
#[derive(Debug, Clone)]
pub struct RestartContext {
    pub shape: SpaceShape,
    /// Confidence budget for this incarnation.
    pub delta: f64,
    /// Total episode budget of the surrounding run.
    pub total_episodes: usize,
}

/// Black-box episodic learner contract.
pub trait EpisodicLearner {
    /// The policy to play at episode `t` (1-based), over the learner's
    /// current shape.
    fn propose_policy(&mut self, t: usize) -> Policy;

    /// Consume the trajectory of episode `t` (in the learner's own state
    /// indices).
    fn observe(&mut self, trajectory: &Trajectory, t: usize) -> Result<()>;

    /// Clear all statistics and adopt a new shape.
    fn restart(&mut self, ctx: RestartContext) -> Result<()>;

    /// Replace the learner's internal transition confidence set for the
    /// current epoch. Optional capability.
    fn inject_confidence_set(&mut self, set: TransitionConfidenceSet) -> Result<()> {
        let _ = set;
        Err(Error::Config("this learner does not accept confidence-set injection".into()))
    }

    fn supports_injection(&self) -> bool {
        false
    }

    fn shape(&self) -> &SpaceShape;
}

/// Learner selection plus hyperparameters, as configured by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearnerConfig {
    /// Optimistic value iteration with the classical bonus.
    Ucbvi {
        #[serde(default = "default_bonus_constant")]
        bonus_constant: f64,
    },
    /// Optimistic value iteration with the arrival-time-allocated bonus.
    UcbviArrival {
        #[serde(default = "default_bonus_constant")]
        bonus_constant: f64,
    },
    /// Occupancy-measure mirror descent with implicit exploration.
    UobReps {
        #[serde(default = "default_rate_scale")]
        rate_scale: f64,
    },
}

fn default_bonus_constant() -> f64 {
    1.0
}

fn default_rate_scale() -> f64 {
    1.0
}

impl LearnerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerConfig::Ucbvi { .. } => "ucbvi",
            LearnerConfig::UcbviArrival { .. } => "ucbvi-arrival",
            LearnerConfig::UobReps { .. } => "uob-reps",
        }
    }

    /// Instantiate the learner on an initial shape.
    pub fn build(&self, ctx: RestartContext) -> Result<Box<dyn EpisodicLearner>> {
        match self {
            LearnerConfig::Ucbvi { bonus_constant } => Ok(Box::new(Ucbvi::new(
                UcbviConfig { bonus: BonusRule::Standard { c: *bonus_constant } },
                ctx,
            ))),
            LearnerConfig::UcbviArrival { bonus_constant } => Ok(Box::new(Ucbvi::new(
                UcbviConfig { bonus: BonusRule::ArrivalAllocated { c: *bonus_constant } },
                ctx,
            ))),
            LearnerConfig::UobReps { rate_scale } => Ok(Box::new(UobReps::new(
                UobRepsConfig { rate_scale: *rate_scale, ..UobRepsConfig::default() },
                ctx,
            )?)),
        }
    }
}
