//! Environment generation and the environment file format.
//!
//! Generated environments consist of a declared reachable core plus padded
//! states that receive zero transition mass from every reachable state (and
//! from the start state), making them exactly unreachable under any policy.
//! Within each layer, reachable states occupy the low indices and padded
//! states are appended after them. Every random quantity is drawn from a
//! substream keyed by `(seed, role, layer, state, action)`, so enlarging the
//! padding changes no draw on the reachable core: runs on differently padded
//! versions of the same core are comparable bit for bit.
//!
//! # Environment files
//!
//! TOML, two kinds:
//!
//! ```toml
//! kind = "generator"
//! horizon = 3
//! reachable-per-layer = [3, 3, 2]
//! padded-per-layer = [10, 10, 10]
//! num-actions = 2
//! seed = 7
//!
//! [loss]
//! mode = "stochastic-uniform"
//! lo = 0.1
//! hi = 0.9
//! # or: mode = "adversarial-phases" with phase-length, total-episodes, lo, hi
//! ```
//!
//! ```toml
//! kind = "explicit"
//! layer-sizes = [1, 2, 1]       # includes start and terminal layers
//! num-actions = 2
//! # transition[h][s][a] = probability row over layer h+1, for h = 0..=H
//! transition = [
//!   [ [ [0.3, 0.7], [0.6, 0.4] ] ],
//!   [ [ [1.0], [1.0] ], [ [1.0], [1.0] ] ],
//! ]
//!
//! [loss]
//! mode = "stochastic-table"
//! means = [ [ [0.2, 0.8], [0.5, 0.5] ] ]   # [h-1][s][a] for h = 1..=H
//! # or: mode = "adversarial-blocks" with blocks = [{ repeat = 10, table = [...] }]
//! ```

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{LayeredMdp, LossModel, SaTable, SpaceShape, State};

/// Loss process generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum LossGenSpec {
    /// Bernoulli means drawn uniformly from `[lo, hi]` per `(s, a)`.
    StochasticUniform { lo: f64, hi: f64 },
    /// Oblivious piecewise-constant schedule: a fresh uniform table every
    /// `phase_length` episodes, `total_episodes` in all.
    AdversarialPhases { phase_length: usize, total_episodes: usize, lo: f64, hi: f64 },
}

/// Family of environments with a declared reachable core and exactly
/// unreachable padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EnvFamilySpec {
    pub horizon: usize,
    pub reachable_per_layer: Vec<usize>,
    #[serde(default)]
    pub padded_per_layer: Vec<usize>,
    pub num_actions: usize,
    pub seed: u64,
    pub loss: LossGenSpec,
}

/// A generated environment with its ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedEnv {
    pub mdp: LayeredMdp,
    pub loss: LossModel,
    /// `max_reach[h - 1][s] = max_pi q(s)` for layers `1..=H`. Padded states
    /// sit at exactly zero.
    pub max_reach: Vec<Vec<f64>>,
}

const ROLE_TRANSITION: u64 = 1;
const ROLE_LOSS: u64 = 2;
const ROLE_ADVERSARIAL: u64 = 3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-cell rng, independent of any other cell's draws.
fn substream(seed: u64, role: u64, h: usize, s: usize, a: usize) -> ChaCha8Rng {
    let mut x = seed;
    for part in [role, h as u64, s as u64, a as u64] {
        x = splitmix64(x ^ part.wrapping_mul(0xD1B54A32D192ED03));
    }
    ChaCha8Rng::seed_from_u64(x)
}

/// Generate the environment described by `spec`, together with the exact
/// per-state reachability table.
pub fn generate_env(spec: &EnvFamilySpec) -> Result<GeneratedEnv> {
    if spec.reachable_per_layer.len() != spec.horizon {
        return Err(Error::Config(format!(
            "reachable-per-layer needs {} entries, got {}",
            spec.horizon,
            spec.reachable_per_layer.len()
        )));
    }
    let padded = if spec.padded_per_layer.is_empty() {
        vec![0; spec.horizon]
    } else if spec.padded_per_layer.len() == spec.horizon {
        spec.padded_per_layer.clone()
    } else {
        return Err(Error::Config(format!(
            "padded-per-layer needs {} entries, got {}",
            spec.horizon,
            spec.padded_per_layer.len()
        )));
    };
    if spec.reachable_per_layer.iter().any(|&n| n == 0) {
        return Err(Error::Config("each layer needs at least one reachable state".into()));
    }

    let mut sizes = vec![1usize];
    for h in 0..spec.horizon {
        sizes.push(spec.reachable_per_layer[h] + padded[h]);
    }
    sizes.push(1);
    let shape = SpaceShape::new(sizes, spec.num_actions)?;

    let reachable_count =
        |layer: usize| -> usize { if layer == 0 || layer == spec.horizon + 1 { 1 } else { spec.reachable_per_layer[layer - 1] } };

    // Transition rows. Reachable sources spread positive mass over the next
    // layer's reachable states only; padded sources get a uniform row (they
    // are never entered, so the choice is inert).
    let mut rows: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(spec.horizon + 1);
    for h in 0..=spec.horizon {
        let succ_total = shape.layer_sizes[h + 1];
        let succ_reachable = reachable_count(h + 1);
        let mut layer_rows = Vec::with_capacity(shape.layer_sizes[h]);
        for s in 0..shape.layer_sizes[h] {
            let is_reachable_source = s < reachable_count(h);
            let mut state_rows = Vec::with_capacity(spec.num_actions);
            for a in 0..spec.num_actions {
                let row = if is_reachable_source {
                    let mut rng = substream(spec.seed, ROLE_TRANSITION, h, s, a);
                    let mut positive: Vec<f64> =
                        (0..succ_reachable).map(|_| rng.gen::<f64>() + 0.1).collect();
                    let total: f64 = positive.iter().sum();
                    positive.iter_mut().for_each(|p| *p /= total);
                    let mut row = vec![0.0; succ_total];
                    row[..succ_reachable].copy_from_slice(&positive);
                    row
                } else {
                    vec![1.0 / succ_total as f64; succ_total]
                };
                state_rows.push(row);
            }
            layer_rows.push(state_rows);
        }
        rows.push(layer_rows);
    }
    let mdp = LayeredMdp::new(shape.clone(), rows)?;

    let loss = match spec.loss {
        LossGenSpec::StochasticUniform { lo, hi } => {
            check_loss_range(lo, hi)?;
            let mut means = SaTable::zeros(&shape);
            for h in 1..=spec.horizon {
                for s in 0..shape.layer_sizes[h] {
                    for a in 0..spec.num_actions {
                        let mut rng = substream(spec.seed, ROLE_LOSS, h, s, a);
                        means.set(State::new(h, s), a, lo + (hi - lo) * rng.gen::<f64>());
                    }
                }
            }
            LossModel::Stochastic(means)
        }
        LossGenSpec::AdversarialPhases { phase_length, total_episodes, lo, hi } => {
            check_loss_range(lo, hi)?;
            if phase_length == 0 {
                return Err(Error::Config("phase-length must be positive".into()));
            }
            let phases = total_episodes.div_ceil(phase_length);
            let mut phase_tables = Vec::with_capacity(phases);
            for p in 0..phases {
                let mut table = SaTable::zeros(&shape);
                for h in 1..=spec.horizon {
                    for s in 0..shape.layer_sizes[h] {
                        for a in 0..spec.num_actions {
                            let mut rng =
                                substream(spec.seed, ROLE_ADVERSARIAL + 7 * (p as u64 + 1), h, s, a);
                            table.set(State::new(h, s), a, lo + (hi - lo) * rng.gen::<f64>());
                        }
                    }
                }
                phase_tables.push(table);
            }
            let tables =
                (0..total_episodes).map(|t| phase_tables[t / phase_length].clone()).collect();
            LossModel::Adversarial(tables)
        }
    };

    let max_reach = max_reach_table(&mdp);
    for h in 1..=spec.horizon {
        for s in 0..shape.layer_sizes[h] {
            let r = max_reach[h - 1][s];
            if s < reachable_count(h) {
                if r <= 0.0 {
                    return Err(Error::Config(format!(
                        "declared reachable state (layer {h}, index {s}) has zero reach"
                    )));
                }
            } else if r != 0.0 {
                return Err(Error::Config(format!(
                    "padded state (layer {h}, index {s}) is reachable with probability {r}"
                )));
            }
        }
    }

    Ok(GeneratedEnv { mdp, loss, max_reach })
}

fn check_loss_range(lo: f64, hi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("loss range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
    }
    Ok(())
}

/// `max_pi q(s*)` for a single target: backward recursion with value 1 at
/// the target and `f(s) = max_a sum_{s'} P(s'|s,a) f(s')` below it. Exact
/// because the maximizing policy may be chosen per target.
pub fn max_reach_of(mdp: &LayeredMdp, target: State) -> f64 {
    if target.layer == 0 {
        return 1.0;
    }
    let mut f = vec![0.0; mdp.layer_size(target.layer)];
    f[target.index] = 1.0;
    for h in (0..target.layer).rev() {
        let mut next = vec![0.0; mdp.layer_size(h)];
        for s in 0..mdp.layer_size(h) {
            let state = State::new(h, s);
            let mut best = 0.0f64;
            for a in 0..mdp.num_actions() {
                let v: f64 =
                    mdp.row(state, a).iter().zip(f.iter()).map(|(&p, &fv)| p * fv).sum();
                best = best.max(v);
            }
            next[s] = best;
        }
        f = next;
    }
    f[0]
}

/// The full reachability table over layers `1..=H`.
pub fn max_reach_table(mdp: &LayeredMdp) -> Vec<Vec<f64>> {
    (1..=mdp.horizon())
        .map(|h| (0..mdp.layer_size(h)).map(|s| max_reach_of(mdp, State::new(h, s))).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Environment files
// ---------------------------------------------------------------------------

/// A loss table encoded as plain nested arrays, `[h - 1][s][a]`.
pub type RawTable = Vec<Vec<Vec<f64>>>;

/// A block of identical adversarial episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBlock {
    pub repeat: usize,
    pub table: RawTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ExplicitLoss {
    StochasticTable { means: RawTable },
    AdversarialBlocks { blocks: Vec<LossBlock> },
}

/// Fully explicit environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExplicitEnv {
    /// All layer sizes including the start and terminal layers.
    pub layer_sizes: Vec<usize>,
    pub num_actions: usize,
    /// `transition[h][s][a]` = probability row over layer `h + 1`.
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    pub loss: ExplicitLoss,
}

/// Contents of an environment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvFile {
    Generator(EnvFamilySpec),
    Explicit(ExplicitEnv),
}

fn table_from_raw(shape: &SpaceShape, raw: &RawTable, what: &str) -> Result<SaTable> {
    if raw.len() != shape.horizon() {
        return Err(Error::Config(format!(
            "{what}: expected {} layers, got {}",
            shape.horizon(),
            raw.len()
        )));
    }
    for (i, layer) in raw.iter().enumerate() {
        if layer.len() != shape.layer_sizes[i + 1] {
            return Err(Error::Config(format!(
                "{what}: layer {} has {} states, expected {}",
                i + 1,
                layer.len(),
                shape.layer_sizes[i + 1]
            )));
        }
        if layer.iter().any(|row| row.len() != shape.num_actions) {
            return Err(Error::Config(format!("{what}: row width mismatch at layer {}", i + 1)));
        }
    }
    Ok(SaTable::new(raw.clone()))
}

/// Materialize an environment file into a model, loss process, and the exact
/// reachability ground truth.
pub fn realize_env(file: &EnvFile) -> Result<GeneratedEnv> {
    match file {
        EnvFile::Generator(spec) => generate_env(spec),
        EnvFile::Explicit(explicit) => {
            let shape = SpaceShape::new(explicit.layer_sizes.clone(), explicit.num_actions)?;
            let mdp = LayeredMdp::new(shape.clone(), explicit.transition.clone())?;
            let loss = match &explicit.loss {
                ExplicitLoss::StochasticTable { means } => {
                    LossModel::Stochastic(table_from_raw(&shape, means, "loss means")?)
                }
                ExplicitLoss::AdversarialBlocks { blocks } => {
                    let mut tables = Vec::new();
                    for (i, block) in blocks.iter().enumerate() {
                        let table =
                            table_from_raw(&shape, &block.table, &format!("adversarial block {i}"))?;
                        tables.extend(std::iter::repeat_n(table, block.repeat));
                    }
                    LossModel::Adversarial(tables)
                }
            };
            loss.validate()?;
            let max_reach = max_reach_table(&mdp);
            Ok(GeneratedEnv { mdp, loss, max_reach })
        }
    }
}

pub fn parse_env_str(text: &str) -> Result<EnvFile> {
    Ok(toml::from_str(text)?)
}

pub fn load_env_file(path: &Path) -> Result<GeneratedEnv> {
    let text = std::fs::read_to_string(path)?;
    realize_env(&parse_env_str(&text)?)
}
