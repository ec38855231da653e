//! How a state earns its admission: visit counts racing the anytime
//! threshold. Prints the trace for three states with different reach
//! probabilities, including one below the pessimism level that (with high
//! probability) never gets in.
//!
//! Usage: `cargo run --example admission_trace`

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use statefree::mdp::{State, Step, Trajectory};
use statefree::reachability::{admission_margin, VisitStats, DEFAULT_ADMISSION_CONSTANT};

fn main() {
    let (delta, eps, horizon) = (0.1, 0.1, 2);
    // Layer-1 visit probabilities: comfortably above 2*eps, just above eps,
    // and at eps/2.
    let probs = [0.55, 0.15, 0.05];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut stats = VisitStats::new();
    let mut admitted = [false; 3];
    for t in 1..=4000usize {
        let u: f64 = rng.gen();
        let visited = if u < probs[0] {
            0
        } else if u < probs[0] + probs[1] {
            1
        } else if u < probs[0] + probs[1] + probs[2] {
            2
        } else {
            0
        };
        let o = Trajectory {
            start_action: 0,
            steps: vec![
                Step { state: visited, action: 0, loss: 0.0 },
                Step { state: 0, action: 0, loss: 0.0 },
            ],
        };
        stats.record_episode(&o, t).unwrap();
        for (i, was) in admitted.iter_mut().enumerate() {
            let s = State::new(1, i);
            let margin =
                admission_margin(stats.visits(s), t, delta, eps, horizon, DEFAULT_ADMISSION_CONSTANT);
            if !*was && margin > 0.0 {
                *was = true;
                println!(
                    "t = {t:4}: state with reach {:.2} admitted (visits {}, margin {margin:.3})",
                    probs[i],
                    stats.visits(s)
                );
            }
        }
        if t % 1000 == 0 {
            for (i, p) in probs.iter().enumerate() {
                let s = State::new(1, i);
                let margin = admission_margin(
                    stats.visits(s),
                    t,
                    delta,
                    eps,
                    horizon,
                    DEFAULT_ADMISSION_CONSTANT,
                );
                println!(
                    "t = {t:4}: reach {p:.2} -> visits {:4}, margin {margin:8.2}{}",
                    stats.visits(s),
                    if margin > 0.0 { " (past the threshold)" } else { "" }
                );
            }
        }
    }
    println!(
        "\nthe eps/2 state needs its visit count to outrun 2*eps*t plus a log term, \
         which a sub-eps reach probability cannot sustain"
    );
}
