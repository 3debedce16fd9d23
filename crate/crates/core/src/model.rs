//! The joint model: both encoders run over the same window of snapshots.

use ndarray::Array2;
use netresil_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dataset::TemporalGraphDataset;
use crate::error::{Error, Result};
use crate::params::{to_array2, to_tensor, BoundParams, ModelParams};
use crate::rng;
use crate::state_encoder::{self, StateEncoderConfig};
use crate::topo_encoder::{self, SnapshotStructure, TopoEncoderConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state: StateEncoderConfig,
    pub topo: TopoEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.state.validate()?;
        self.topo.validate()
    }
}

/// Fresh parameters for feature dimension `m`, drawn from the `init` stream.
pub fn init_params(cfg: &ModelConfig, m: usize, seed: u64) -> ModelParams {
    let mut rng = rng::stream(seed, rng::INIT, 0);
    let mut p = ModelParams::new();
    state_encoder::init(&cfg.state, m, &mut p, &mut rng);
    topo_encoder::init(&cfg.topo, m, &mut p, &mut rng);
    p
}

/// A window of consecutive snapshots and the time of the snapshot to be
/// predicted after it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowData {
    pub states: Vec<Array2<f64>>,
    pub adjacency: Vec<Array2<f64>>,
    pub norm_adjacency: Vec<Array2<f64>>,
    pub times: Vec<f64>,
    pub target_time: f64,
    pub symmetric: bool,
}

impl WindowData {
    /// Snapshots `target - len .. target` of `d`.
    pub fn from_dataset(d: &TemporalGraphDataset, target: usize, len: usize) -> Result<Self> {
        if len == 0 || target < len || target >= d.horizon() {
            return Err(Error::Config(format!(
                "window of {len} snapshots before snapshot {target} does not fit a horizon of {}",
                d.horizon()
            )));
        }
        let snaps = &d.snapshots[target - len..target];
        Ok(Self {
            states: snaps.iter().map(|s| s.states.clone()).collect(),
            adjacency: snaps.iter().map(|s| s.graph.symmetric_adjacency()).collect(),
            norm_adjacency: snaps.iter().map(|s| s.graph.laplacian().sym_norm_adjacency).collect(),
            times: snaps.iter().map(|s| s.time).collect(),
            target_time: d.snapshots[target].time,
            symmetric: !snaps.iter().any(|s| s.graph.is_directed()),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.states[0].nrows()
    }

    /// Time from each window snapshot to the next one (the last entry runs
    /// to the target).
    pub fn gaps(&self) -> Vec<f64> {
        let mut next = self.times[1..].to_vec();
        next.push(self.target_time);
        next.iter().zip(&self.times).map(|(b, a)| b - a).collect()
    }

    pub fn is_regular(&self) -> bool {
        let g = self.gaps();
        g.iter().all(|x| (x - g[0]).abs() <= 1e-9 * g[0].abs().max(1.0))
    }
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// Observed window states (constants).
    pub observed: Vec<Var>,
    /// Prediction of the snapshot following each window position.
    pub predictions: Vec<Var>,
    /// Predicted states at the target time.
    pub next_state: Var,
    /// Predicted `[N, N]` edge probabilities at the target time.
    pub adjacency: Var,
    /// Observed adjacency of the last window snapshot (constant).
    pub last_adjacency: Var,
    pub gaps: Vec<f64>,
}

pub fn forward(tape: &mut Tape, bp: &BoundParams, cfg: &ModelConfig, w: &WindowData) -> Result<Forward> {
    if w.is_empty() {
        return Err(Error::Config("empty window".into()));
    }
    let observed: Vec<Var> = w.states.iter().map(|s| tape.constant(to_tensor(s))).collect();
    let mut state_steps = Vec::with_capacity(w.len());
    let mut topo_steps = Vec::with_capacity(w.len());
    let mut last_adjacency = None;
    for k in 0..w.len() {
        let s_norm = tape.constant(to_tensor(&w.norm_adjacency[k]));
        state_steps.push((s_norm, observed[k]));
        let (st, mask) = SnapshotStructure::new(tape, &to_tensor(&w.adjacency[k]))?;
        last_adjacency = Some(st.adjacency);
        topo_steps.push((observed[k], st, mask));
    }
    let gaps = w.gaps();
    let irregular = (!w.is_regular()).then_some(gaps.as_slice());
    let predictions = state_encoder::predict_positions(tape, bp, &cfg.state, &state_steps, irregular)?;
    let adjacency = topo_encoder::predict_adjacency(tape, bp, &cfg.topo, &topo_steps, w.symmetric)?;
    Ok(Forward {
        next_state: *predictions.last().expect("window is non-empty"),
        observed,
        predictions,
        adjacency,
        last_adjacency: last_adjacency.expect("window is non-empty"),
        gaps,
    })
}

/// Inference: predicted next states `[N, M]` and edge probabilities `[N, N]`.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, w: &WindowData) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let f = forward(&mut tape, &bp, cfg, w)?;
    Ok((to_array2(tape.value(f.next_state))?, to_array2(tape.value(f.adjacency))?))
}
