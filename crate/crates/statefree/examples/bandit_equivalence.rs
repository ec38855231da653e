//! Degeneration check: on a single-state, horizon-1 world the mirror-descent
//! learner is exponential weights with implicit exploration. This example
//! runs it head-to-head against a directly coded reference on one shared
//! action/loss stream and prints the worst per-step policy deviation.
//!
//! Usage: `cargo run --release --example bandit_equivalence [steps]`

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use statefree::learners::{
    adaptive_rate, EpisodicLearner, ProjectionOptions, RestartContext, UobReps, UobRepsConfig,
};
use statefree::mdp::{sample_index, SpaceShape, State, Step, Trajectory};

fn main() {
    let steps: usize =
        std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let actions = 3;
    let delta = 0.1;
    let shape = SpaceShape::new(vec![1, 1, 1], actions).unwrap();

    let mut table_rng = ChaCha8Rng::seed_from_u64(99);
    let tables: Vec<Vec<f64>> = (0..steps)
        .map(|_| (0..actions).map(|_| (table_rng.gen::<f64>() * 64.0).round() / 64.0).collect())
        .collect();

    let mut learner = UobReps::new(
        UobRepsConfig {
            rate_scale: 1.0,
            projection: ProjectionOptions { inner_tol: 0.0, max_inner_sweeps: 120, ..Default::default() },
        },
        RestartContext { shape, delta, total_episodes: steps },
    )
    .unwrap();

    let mut ref_probs = vec![1.0 / actions as f64; actions];
    let mut action_rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst: f64 = 0.0;
    let bandit_state = State::new(1, 0);
    for t in 1..=steps {
        let policy = learner.propose_policy(t);
        let row = policy.row(bandit_state);
        let step_dev = (0..actions)
            .map(|a| (row[a] - ref_probs[a]).abs())
            .fold(0.0f64, f64::max);
        if step_dev > worst {
            worst = step_dev;
            if worst > 1e-13 {
                println!("t={t:4} deviation {worst:.3e} (projection stats: {:?})", learner.last_projection_stats());
            }
        }
        let a_t = sample_index(&ref_probs, &mut action_rng);
        let loss = tables[t - 1][a_t];
        learner
            .observe(
                &Trajectory { start_action: 0, steps: vec![Step { state: 0, action: a_t, loss }] },
                t,
            )
            .unwrap();
        let rate = adaptive_rate(1, 1, actions, t, delta);
        let l_hat = loss / (ref_probs[a_t] + rate);
        let mut w: Vec<f64> = ref_probs.clone();
        w[a_t] *= (-rate * l_hat).exp();
        let z: f64 = w.iter().sum();
        ref_probs = w.into_iter().map(|v| v / z).collect();
    }
    println!("worst per-step policy deviation over {steps} steps: {worst:.3e}");
}
