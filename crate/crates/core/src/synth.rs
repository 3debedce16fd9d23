//! Seeded synthetic temporal graphs: an initial topology, random edge churn
//! between snapshots, and node states from integrating a dynamics family
//! plus Gaussian observation noise.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, Snapshot, TemporalGraphDataset};
use crate::dynamics::{integrate_with, Dynamics, IntegrateOptions, MutualisticParams};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::ModelConfig;
use crate::physics::PhysicsParams;
use crate::rng;
use crate::state_encoder::{OdeSolver, StateEncoderConfig};
use crate::topo_encoder::TopoEncoderConfig;
use crate::trainer::{AdjacencySource, TrainConfig};

const TOPOLOGY: &str = "topology";
const CHURN: &str = "churn";
const STATES: &str = "states";
const NOISE: &str = "noise";
const TIMES: &str = "times";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TopologyFamily {
    ErdosRenyi { p: f64 },
    BarabasiAlbert { m: usize },
    /// `layers` groups of `width` nodes; edges only join consecutive layers,
    /// each admissible pair present with probability `p_link`.
    LayeredChain { layers: usize, width: usize, p_link: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Uniform { low: f64, high: f64 },
    /// Layered chains only: in layer `l`, channels `l mod M` and
    /// `(l + 1) mod M` start at `high`, the rest at `low`, each plus
    /// uniform jitter in `[-jitter, jitter]`.
    LayerProfile { high: f64, low: f64, jitter: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Timestamps {
    Regular { interval: f64 },
    /// Gaps drawn uniformly from `[interval * (1 - spread), interval * (1 + spread)]`.
    Irregular { interval: f64, spread: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub name: String,
    pub n_nodes: usize,
    pub feature_dim: usize,
    pub horizon: usize,
    pub topology: TopologyFamily,
    pub p_add: f64,
    pub p_drop: f64,
    pub edge_weight: f64,
    pub dynamics: Dynamics,
    pub initial_state: InitialState,
    pub timestamps: Timestamps,
    pub integration_dt: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_nodes < 2 || self.feature_dim == 0 {
            return bad("generator needs n_nodes >= 2 and feature_dim >= 1".into());
        }
        if self.horizon < 2 {
            return bad(format!("horizon must be >= 2, got {}", self.horizon));
        }
        for (name, p) in [("p_add", self.p_add), ("p_drop", self.p_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.noise_std >= 0.0) || !(self.edge_weight > 0.0) || !(self.integration_dt > 0.0) {
            return bad("noise_std must be >= 0, edge_weight and integration_dt > 0".into());
        }
        match self.topology {
            TopologyFamily::ErdosRenyi { p } if !(0.0..=1.0).contains(&p) => return bad(format!("edge probability {p} outside [0, 1]")),
            TopologyFamily::BarabasiAlbert { m } if m == 0 || m >= self.n_nodes => {
                return bad(format!("attachment count m = {m} must lie in [1, n_nodes)"))
            }
            TopologyFamily::LayeredChain { layers, width, p_link } => {
                if layers * width != self.n_nodes || layers < 2 {
                    return bad(format!(
                        "layered chain of {layers} x {width} does not match n_nodes = {}",
                        self.n_nodes
                    ));
                }
                if !(0.0..=1.0).contains(&p_link) {
                    return bad(format!("p_link {p_link} outside [0, 1]"));
                }
            }
            _ => {}
        }
        if matches!(self.initial_state, InitialState::LayerProfile { .. })
            && !matches!(self.topology, TopologyFamily::LayeredChain { .. })
        {
            return bad("layer_profile initial states need a layered_chain topology".into());
        }
        match self.timestamps {
            Timestamps::Regular { interval } if !(interval > 0.0) => bad("snapshot interval must be positive".into()),
            Timestamps::Irregular { interval, spread } if !(interval > 0.0) || !(0.0..1.0).contains(&spread) => {
                bad("irregular timestamps need interval > 0 and spread in [0, 1)".into())
            }
            _ => Ok(()),
        }
    }

    fn layer_of(&self, i: usize) -> Option<usize> {
        match self.topology {
            TopologyFamily::LayeredChain { width, .. } => Some(i / width),
            _ => None,
        }
    }

    /// Whether the pair may ever carry an edge.
    pub fn admissible(&self, i: usize, j: usize) -> bool {
        i != j
            && match (self.layer_of(i), self.layer_of(j)) {
                (Some(a), Some(b)) => a.abs_diff(b) == 1,
                _ => true,
            }
    }
}

fn initial_topology(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = cfg.n_nodes;
    let w = cfg.edge_weight;
    let mut a = Array2::zeros((n, n));
    let link = |a: &mut Array2<f64>, i: usize, j: usize| {
        a[[i, j]] = w;
        a[[j, i]] = w;
    };
    match cfg.topology {
        TopologyFamily::ErdosRenyi { p } => {
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(p) {
                        link(&mut a, i, j);
                    }
                }
            }
        }
        TopologyFamily::LayeredChain { p_link, .. } => {
            for i in 0..n {
                for j in i + 1..n {
                    if cfg.admissible(i, j) && rng.gen_bool(p_link) {
                        link(&mut a, i, j);
                    }
                }
            }
        }
        TopologyFamily::BarabasiAlbert { m } => {
            let mut degree = vec![0usize; n];
            for i in 0..=m {
                for j in i + 1..=m {
                    link(&mut a, i, j);
                    degree[i] += 1;
                    degree[j] += 1;
                }
            }
            for new in m + 1..n {
                let mut chosen = HashSet::new();
                while chosen.len() < m {
                    let total: usize = (0..new).filter(|v| !chosen.contains(v)).map(|v| degree[v]).sum();
                    let mut r = rng.gen_range(0..total);
                    for v in (0..new).filter(|v| !chosen.contains(v)) {
                        if r < degree[v] {
                            chosen.insert(v);
                            break;
                        }
                        r -= degree[v];
                    }
                }
                let mut chosen: Vec<usize> = chosen.into_iter().collect();
                chosen.sort_unstable();
                for v in chosen {
                    link(&mut a, new, v);
                    degree[new] += 1;
                    degree[v] += 1;
                }
            }
        }
    }
    a
}

/// One churn step: drop each edge with `p_drop`, add each absent admissible
/// pair with `p_add` (scaled by the normalized degree product for
/// preferential attachment families, capped at 1).
fn churn(cfg: &GeneratorConfig, a: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = cfg.n_nodes;
    let preferential = matches!(cfg.topology, TopologyFamily::BarabasiAlbert { .. });
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().filter(|&&w| w != 0.0).count() as f64).collect();
    let mean_deg = (degree.iter().sum::<f64>() / n as f64).max(1.0);
    let mut out = a.clone();
    for i in 0..n {
        for j in i + 1..n {
            let present = a[[i, j]] != 0.0;
            let flip = if present {
                rng.gen_bool(cfg.p_drop)
            } else if cfg.admissible(i, j) {
                let p = if preferential {
                    (cfg.p_add * (degree[i] + 1.0) * (degree[j] + 1.0) / ((mean_deg + 1.0) * (mean_deg + 1.0))).min(1.0)
                } else {
                    cfg.p_add
                };
                rng.gen_bool(p)
            } else {
                false
            };
            if flip {
                let w = if present { 0.0 } else { cfg.edge_weight };
                out[[i, j]] = w;
                out[[j, i]] = w;
            }
        }
    }
    out
}

fn initial_states(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, m) = (cfg.n_nodes, cfg.feature_dim);
    match cfg.initial_state {
        InitialState::Uniform { low, high } => Array2::from_shape_fn((n, m), |_| rng.gen_range(low..=high)),
        InitialState::LayerProfile { high, low, jitter } => Array2::from_shape_fn((n, m), |(i, c)| {
            let l = cfg.layer_of(i).unwrap_or(0);
            let base = if c == l % m || c == (l + 1) % m { high } else { low };
            base + if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 }
        }),
    }
}

/// Noise-free states at time 0 for `cfg` (snapshot 0 before observation
/// noise).
pub fn initial_condition(cfg: &GeneratorConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    Ok(initial_states(cfg, &mut rng::stream(cfg.seed, STATES, 0)))
}

fn timestamps(cfg: &GeneratorConfig) -> Vec<f64> {
    let mut rng = rng::stream(cfg.seed, TIMES, 0);
    let mut t = vec![0.0];
    for _ in 1..cfg.horizon {
        let gap = match cfg.timestamps {
            Timestamps::Regular { interval } => interval,
            Timestamps::Irregular { interval, spread } => {
                interval * rng.gen_range(1.0 - spread..=1.0 + spread)
            }
        };
        t.push(t.last().unwrap() + gap);
    }
    t
}

/// Generates the dataset described by `cfg`; identical configs give
/// identical datasets.
pub fn generate(cfg: &GeneratorConfig) -> Result<TemporalGraphDataset> {
    cfg.validate()?;
    let times = timestamps(cfg);
    let mut topo_rng = rng::stream(cfg.seed, TOPOLOGY, 0);
    let mut adjacency = vec![initial_topology(cfg, &mut topo_rng)];
    for k in 1..cfg.horizon {
        let mut r = rng::stream(cfg.seed, CHURN, k as u64);
        adjacency.push(churn(cfg, &adjacency[k - 1], &mut r));
    }

    let mut state_rng = rng::stream(cfg.seed, STATES, 0);
    let mut clean = vec![initial_states(cfg, &mut state_rng)];
    for k in 1..cfg.horizon {
        let g = Graph::undirected(adjacency[k - 1].clone())?;
        let gap = times[k] - times[k - 1];
        let steps = (gap / cfg.integration_dt).ceil().max(1.0);
        let opts = IntegrateOptions {
            dt: gap / steps,
            t_end: gap,
            sample_every: usize::MAX,
        };
        let traj = integrate_with(&g, &cfg.dynamics, &clean[k - 1], opts)?;
        clean.push(traj.final_state().clone());
    }

    let mut noise_rng = rng::stream(cfg.seed, NOISE, 0);
    let normal = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut snapshots = Vec::with_capacity(cfg.horizon);
    for k in 0..cfg.horizon {
        let states = if cfg.noise_std > 0.0 {
            clean[k].mapv(|v| v + normal.sample(&mut noise_rng))
        } else {
            clean[k].clone()
        };
        snapshots.push(Snapshot {
            time: times[k],
            graph: Graph::undirected(adjacency[k].clone())?,
            states,
        });
    }
    let meta = DatasetMeta {
        name: cfg.name.clone(),
        n_nodes: 0,
        feature_dim: 0,
        horizon: 0,
        generator: serde_json::to_value(cfg).map_err(|e| Error::json("serializing generator config", e))?,
        seed: cfg.seed,
        dynamics: match &cfg.dynamics {
            Dynamics::Mutualistic(_) => "mutualistic".into(),
            Dynamics::LinearDiffusion { .. } => "linear_diffusion".into(),
        },
        timestamps: vec![],
        disconnected_snapshots: vec![],
    };
    TemporalGraphDataset::new(meta, snapshots)
}

/// The generator config embedded in a dataset's metadata, if any.
pub fn embedded_config(d: &TemporalGraphDataset) -> Option<GeneratorConfig> {
    serde_json::from_value(d.meta.generator.clone()).ok()
}

/// Disjoint train/test partition of the edges of one snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSplit {
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

/// Seeded shuffle split of the edges of snapshot `target`; the train part
/// holds `round(ratio * |E|)` edges. Both parts come back sorted.
pub fn split_at(d: &TemporalGraphDataset, target: usize, ratio: f64, seed: u64) -> Result<EdgeSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let snap = d
        .snapshots
        .get(target)
        .ok_or_else(|| Error::Config(format!("no snapshot {target}")))?;
    let mut edges: Vec<(usize, usize)> = snap.graph.edges().iter().map(|&(i, j, _)| (i, j)).collect();
    let k = (ratio * edges.len() as f64).round() as usize;
    if k == 0 || k == edges.len() {
        return Err(Error::Dataset(format!(
            "snapshot {target} has {} edges, too few to split at ratio {ratio}",
            edges.len()
        )));
    }
    edges.shuffle(&mut rng::stream(seed, rng::SPLIT, 0));
    let mut train = edges[..k].to_vec();
    let mut test = edges[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(EdgeSplit { train, test })
}

/// Split of the last snapshot's edges.
pub fn split(d: &TemporalGraphDataset, ratio: f64, seed: u64) -> Result<EdgeSplit> {
    split_at(d, d.horizon() - 1, ratio, seed)
}

pub const PRESET_NAMES: [&str; 8] = [
    "manufacturing-mini",
    "electronics-mini",
    "financial-mini",
    "resilient-demo",
    "sparse-collapse",
    "manufacturing-full",
    "electronics-full",
    "financial-full",
];

fn base(name: &str, n: usize, m: usize, horizon: usize, topology: TopologyFamily, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        name: name.into(),
        n_nodes: n,
        feature_dim: m,
        horizon,
        topology,
        p_add: 0.002,
        p_drop: 0.02,
        edge_weight: 0.03,
        dynamics: Dynamics::Mutualistic(MutualisticParams::default()),
        initial_state: InitialState::Uniform { low: 0.5, high: 2.0 },
        timestamps: Timestamps::Regular { interval: 0.5 },
        integration_dt: 0.01,
        noise_std: 0.01,
        seed,
    }
}

/// Named generator configs. The `-mini` presets are one-tenth scale echoes
/// of the industrial datasets; the `-full` ones match their node counts,
/// feature widths and horizons.
pub fn preset(name: &str) -> Option<GeneratorConfig> {
    let layered = |layers, width, p_link| TopologyFamily::LayeredChain { layers, width, p_link };
    let cfg = match name {
        "manufacturing-mini" => GeneratorConfig {
            initial_state: InitialState::LayerProfile {
                high: 1.5,
                low: 0.1,
                jitter: 0.05,
            },
            p_add: 0.01,
            ..base(name, 96, 8, 30, layered(8, 12, 0.4), 96)
        },
        "electronics-mini" => GeneratorConfig {
            initial_state: InitialState::LayerProfile {
                high: 1.5,
                low: 0.1,
                jitter: 0.05,
            },
            p_add: 0.01,
            ..base(name, 70, 8, 30, layered(7, 10, 0.4), 70)
        },
        "financial-mini" => GeneratorConfig {
            timestamps: Timestamps::Irregular {
                interval: 0.5,
                spread: 0.6,
            },
            ..base(name, 150, 4, 20, TopologyFamily::BarabasiAlbert { m: 3 }, 150)
        },
        "resilient-demo" => GeneratorConfig {
            initial_state: InitialState::LayerProfile {
                high: 1.0,
                low: 0.1,
                jitter: 0.05,
            },
            p_add: 0.0133,
            noise_std: 0.2,
            ..base(name, 96, 8, 30, layered(8, 12, 0.4), 7)
        },
        "sparse-collapse" => GeneratorConfig {
            edge_weight: 0.9,
            p_add: 0.0,
            p_drop: 0.0,
            initial_state: InitialState::Uniform { low: 0.1, high: 0.2 },
            ..base(name, 100, 1, 20, TopologyFamily::ErdosRenyi { p: 0.09 }, 11)
        },
        "manufacturing-full" => GeneratorConfig {
            p_add: 0.001,
            ..base(name, 960, 32, 30, layered(10, 96, 0.05), 960)
        },
        "electronics-full" => GeneratorConfig {
            p_add: 0.001,
            ..base(name, 700, 32, 30, layered(10, 70, 0.06), 700)
        },
        "financial-full" => GeneratorConfig {
            timestamps: Timestamps::Irregular {
                interval: 0.5,
                spread: 0.6,
            },
            p_add: 0.0002,
            ..base(name, 1500, 16, 20, TopologyFamily::BarabasiAlbert { m: 3 }, 1500)
        },
        _ => return None,
    };
    Some(cfg)
}

pub fn presets() -> Vec<GeneratorConfig> {
    PRESET_NAMES.iter().filter_map(|n| preset(n)).collect()
}

/// Training settings tuned for a preset (falls back to the defaults).
pub fn preset_train_config(name: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    match name {
        "resilient-demo" | "manufacturing-mini" | "electronics-mini" => {
            cfg.learning_rate = 1e-2;
            cfg.physics = PhysicsParams {
                alpha: -1.0,
                beta: -0.01,
                gamma: 0.0,
            };
            cfg.physics_adjacency = AdjacencySource::Observed;
            cfg.model = ModelConfig {
                state: StateEncoderConfig {
                    ode_solver: OdeSolver::None,
                    ..Default::default()
                },
                topo: TopoEncoderConfig::default(),
            };
        }
        "financial-mini" | "financial-full" => {
            cfg.learning_rate = 1e-2;
        }
        _ => {}
    }
    cfg.dataset = None;
    cfg
}
