//! Ablation: does carrying transition knowledge across learner restarts pay?
//!
//! Runs the reduction with the mirror-descent learner twice per seed on an
//! adversarial fixture with staggered state-discovery times: once restarting
//! from scratch, once with the arrival-time confidence set injected each
//! epoch. Prints per-seed final expected regrets and a checkpoint trace for
//! the first seed.
//!
//! Usage: `cargo run --release --example injection_ablation [seeds] [episodes]`

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use statefree::driver::{run, InjectionMode, SfRlConfig};
use statefree::learners::LearnerConfig;
use statefree::mdp::{LayeredMdp, LossModel, SaTable, SpaceShape, State};

fn fixture(episodes: usize) -> (LayeredMdp, LossModel) {
    // Eight reachable states with staggered discovery times: rare states are
    // reached with action-independent probabilities 0.05 / 0.02 (layer 1),
    // ~0.08 / ~0.03 (layer 2) and 0.04 (layer 3), so the driver keeps
    // admitting new states — and restarting the learner — deep into the run.
    let shape = SpaceShape::new(vec![1, 3, 3, 2, 1], 2).unwrap();
    let rows = vec![
        vec![vec![vec![0.93, 0.05, 0.02], vec![0.93, 0.05, 0.02]]],
        vec![
            vec![vec![0.90, 0.07, 0.03], vec![0.89, 0.08, 0.03]],
            vec![vec![0.88, 0.09, 0.03], vec![0.90, 0.07, 0.03]],
            vec![vec![0.85, 0.10, 0.05], vec![0.87, 0.09, 0.04]],
        ],
        vec![
            vec![vec![0.96, 0.04], vec![0.96, 0.04]],
            vec![vec![0.95, 0.05], vec![0.96, 0.04]],
            vec![vec![0.96, 0.04], vec![0.95, 0.05]],
        ],
        vec![
            vec![vec![1.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
        ],
    ];
    let mdp = LayeredMdp::new(shape.clone(), rows).unwrap();

    // Oblivious drifting schedule: a fixed base table with strong action
    // gaps, wiggled every 400 episodes. The comparator stays meaningful
    // while the losses remain genuinely time-varying.
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut base = SaTable::zeros(&shape);
    for h in 1..=3 {
        for s in 0..shape.layer_sizes[h] {
            for a in 0..2 {
                let v = if rng.gen::<bool>() { 0.15 } else { 0.85 };
                base.set(State::new(h, s), a, v);
            }
        }
    }
    let phase_length = 400;
    let phases = episodes.div_ceil(phase_length);
    let mut phase_tables = Vec::with_capacity(phases);
    for _ in 0..phases {
        let mut t = base.clone();
        for h in 1..=3 {
            for s in 0..shape.layer_sizes[h] {
                for a in 0..2 {
                    let state = State::new(h, s);
                    let wiggle = 0.12 * (2.0 * rng.gen::<f64>() - 1.0);
                    t.set(state, a, (t.get(state, a) + wiggle).clamp(0.0, 1.0));
                }
            }
        }
        phase_tables.push(t);
    }
    let tables = (0..episodes).map(|t| phase_tables[t / phase_length].clone()).collect();
    (mdp, LossModel::Adversarial(tables))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let episodes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let (mdp, loss) = fixture(episodes);

    let mut wins = 0;
    for seed in 0..seeds {
        let scratch_cfg =
            SfRlConfig::new(0.1, 0.0, episodes, LearnerConfig::UobReps { rate_scale: 1.0 });
        let inject_cfg = scratch_cfg.clone().with_injection(InjectionMode::ImprovedSet);
        let scratch = run(scratch_cfg, &mdp, &loss, 5_000 + seed).unwrap();
        let injected = run(inject_cfg, &mdp, &loss, 5_000 + seed).unwrap();
        let (rs, ri) = (
            scratch.final_expected_regret().unwrap(),
            injected.final_expected_regret().unwrap(),
        );
        if ri < rs {
            wins += 1;
        }
        println!(
            "seed {seed:2}  scratch {rs:8.2}  injected {ri:8.2}  {}  (restarts: {} vs {})",
            if ri < rs { "inject wins" } else { "scratch wins" },
            scratch.restarts.len(),
            injected.restarts.len(),
        );
        if seed == 0 {
            let es = scratch.cum_expected_regret().unwrap();
            let ei = injected.cum_expected_regret().unwrap();
            println!("  restart episodes (scratch): {:?}", scratch.restarts.iter().map(|r| r.0).collect::<Vec<_>>());
            let mut cp = 250;
            while cp <= episodes {
                println!("    t={cp:5}  scratch {:8.2}  injected {:8.2}", es[cp - 1], ei[cp - 1]);
                cp += 750;
            }
        }
    }
    println!("injected wins on {wins}/{seeds} seeds");
}
