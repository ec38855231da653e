//! The pruned world view, step by step: admit a subset of states, build the
//! pruned transition, rewrite trajectories, and verify by full enumeration
//! that sampling in the real world and rewriting gives exactly the same
//! trajectory distribution as executing directly on the pruned model.
//!
//! Usage: `cargo run --example pruning_walkthrough`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use statefree::env::{generate_env, EnvFamilySpec, LossGenSpec};
use statefree::mdp::{sample_trajectory, LossModel, Policy, SaTable, State};
use statefree::pruned::{build_pruned_transition, extend_policy, prune_trajectory, PrunedSpace};
use statefree::validate::trajectory_equivalence_deviation;

fn main() {
    let env = generate_env(&EnvFamilySpec {
        horizon: 3,
        reachable_per_layer: vec![3, 3, 2],
        padded_per_layer: vec![],
        num_actions: 2,
        seed: 314,
        loss: LossGenSpec::StochasticUniform { lo: 0.0, hi: 1.0 },
    })
    .unwrap();
    let mdp = &env.mdp;

    // Admit a strict subset: everything except one state per layer.
    let mut space = PrunedSpace::new(3, 2);
    space.admit(&[
        State::new(1, 0),
        State::new(1, 2),
        State::new(2, 1),
        State::new(3, 0),
    ]);
    println!("pruned space v{}: {} admitted + {} auxiliary states", space.version(), space.admitted_count(), 3);

    let pruned = build_pruned_transition(mdp, &space).unwrap();
    let u = State::new(1, 0); // pruned index 0 of layer 1
    println!("pruned row from the first admitted layer-1 state under action 0:");
    for (s2, p) in pruned.row(u, 0).iter().enumerate() {
        let label = if space.is_aux(2, s2) { " (auxiliary)" } else { "" };
        println!("  -> pruned state {s2}{label}: {p:.4}");
    }

    // Rewriting a sampled trajectory.
    let policy = extend_policy(&Policy::uniform(&space.shape()), &space, mdp.shape()).unwrap();
    let loss = LossModel::Stochastic(SaTable::constant(mdp.shape(), 0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 1..=4 {
        let o = sample_trajectory(mdp, &policy, &loss, t, &mut rng).unwrap();
        let rewritten = prune_trajectory(&o, &space);
        println!(
            "episode {t}: real states {:?} -> pruned indices {:?}",
            o.steps.iter().map(|s| s.state).collect::<Vec<_>>(),
            rewritten.steps.iter().map(|s| s.state).collect::<Vec<_>>()
        );
    }

    // The exact equivalence behind the reduction, by full enumeration.
    let mut table = SaTable::zeros(mdp.shape());
    for h in 1..=3 {
        for s in 0..mdp.layer_size(h) {
            for a in 0..2 {
                table.set(State::new(h, s), a, ((h + s + a) % 3) as f64 / 4.0);
            }
        }
    }
    let dev = trajectory_equivalence_deviation(mdp, &space, &policy, &table).unwrap();
    println!("max deviation between sample-then-rewrite and direct pruned execution: {dev:.3e}");
}
