//! Core model mechanics: build a layered MDP, compute exact occupancy
//! measures, price policies against loss tables, and find the
//! best-in-hindsight comparator.
//!
//! Usage: `cargo run --example occupancy_basics`

use statefree::mdp::{
    best_in_hindsight, compute_occupancy, expected_loss, LayeredMdp, Policy, SaTable, SpaceShape,
    State,
};

fn main() {
    // Two decision layers. Layer 1 = {safe, risky}; layer 2 = {good, bad}.
    // Action 1 at the start gambles on the risky branch.
    let shape = SpaceShape::new(vec![1, 2, 2, 1], 2).unwrap();
    let rows = vec![
        vec![vec![vec![0.9, 0.1], vec![0.2, 0.8]]],
        vec![
            vec![vec![0.7, 0.3], vec![0.5, 0.5]],
            vec![vec![0.1, 0.9], vec![0.95, 0.05]],
        ],
        vec![
            vec![vec![1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
        ],
    ];
    let mdp = LayeredMdp::new(shape.clone(), rows).unwrap();

    // Losses: the bad state is expensive, the risky state mildly so.
    let mut losses = SaTable::zeros(&shape);
    losses.set(State::new(1, 1), 0, 0.3);
    losses.set(State::new(1, 1), 1, 0.3);
    losses.set(State::new(2, 1), 0, 0.9);
    losses.set(State::new(2, 1), 1, 0.9);

    let uniform = Policy::uniform(&shape);
    let q = compute_occupancy(&mdp, &uniform).unwrap();
    println!("occupancy of the uniform policy (layer, state, action -> q):");
    for (s, a, v) in q.iter() {
        if v > 0.0 {
            println!("  ({}, {}, {a}) -> {v:.4}", s.layer, s.index);
        }
    }
    println!("uniform policy expected loss: {:.4}", expected_loss(&q, &losses).unwrap());

    let (best, value) = best_in_hindsight(&mdp, &losses).unwrap();
    println!("best fixed policy expected loss: {value:.4}");
    for h in 0..=shape.horizon() {
        for s in 0..shape.layer_sizes[h] {
            let row = best.row(State::new(h, s));
            let a = row.iter().position(|&p| p == 1.0).unwrap();
            println!("  best action at (layer {h}, state {s}): {a}");
        }
    }
}
