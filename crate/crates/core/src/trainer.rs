//! Joint training of both encoders under `physics residual + edge
//! cross-entropy`, Adam updates, and JSON checkpoints.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use netresil_autodiff::{Tape, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TemporalGraphDataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, WindowData};
use crate::params::{BoundParams, ModelParams, StoredTensor};
use crate::physics::{self, PhysicsParams, StatePair};
use crate::rng;
use crate::synth::{split, EdgeSplit};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Which adjacency the physics residual diffuses over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencySource {
    /// The topology head's edge probabilities.
    #[default]
    Predicted,
    /// The last observed snapshot in the window.
    Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub physics: PhysicsParams,
    /// Number of snapshots fed to the encoders.
    pub window: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub dataset: Option<String>,
    pub model: ModelConfig,
    pub physics_adjacency: AdjacencySource,
    /// Also fit every earlier window of the dataset each epoch.
    pub sliding_windows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            physics: PhysicsParams::default(),
            window: 8,
            seed: 0,
            split_ratio: 0.8,
            dataset: None,
            model: ModelConfig::default(),
            physics_adjacency: AdjacencySource::Predicted,
            sliding_windows: false,
        }
    }
}

impl TrainConfig {
    /// `allow_zero_epochs` admits the initialization-only run used in tests.
    pub fn validate(&self, allow_zero_epochs: bool) -> Result<()> {
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("optimizer decays must lie in [0, 1) and epsilon be positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        self.physics.validate()?;
        self.model.validate()
    }
}

/// Binary cross-entropy over the given positive and negative pairs of a
/// dense probability matrix, averaged over all of them.
pub fn topology_loss(tape: &mut Tape, a_hat: Var, positives: &[(usize, usize)], negatives: &[(usize, usize)]) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::Graph("topology loss is undefined for a graph without edges".into()));
    }
    let n = tape.shape(a_hat)[1];
    let flat = |pairs: &[(usize, usize)]| pairs.iter().map(|&(i, j)| i * n + j).collect::<Vec<_>>();
    let total = (positives.len() + negatives.len()) as f64;
    let p = tape.gather(a_hat, &flat(positives))?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = tape.ln(p);
    let mut sum = tape.sum(lp);
    if !negatives.is_empty() {
        let q = tape.gather(a_hat, &flat(negatives))?;
        let q = tape.clamp(q, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let q = tape.mul_scalar(q, -1.0);
        let q = tape.add_scalar(q, 1.0);
        let lq = tape.ln(q);
        let s = tape.sum(lq);
        sum = tape.add(sum, s)?;
    }
    Ok(tape.mul_scalar(sum, -1.0 / total))
}

fn bce(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Plain evaluation of [`topology_loss`].
pub fn topology_loss_values(a_hat: &Array2<f64>, positives: &[(usize, usize)], negatives: &[(usize, usize)]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Graph("topology loss is undefined for a graph without edges".into()));
    }
    let pos: f64 = positives.iter().map(|&(i, j)| bce(a_hat[[i, j]], true)).sum();
    let neg: f64 = negatives.iter().map(|&(i, j)| bce(a_hat[[i, j]], false)).sum();
    Ok((pos + neg) / (positives.len() + negatives.len()) as f64)
}

/// Expected value of the 1:1 sampled loss: mean positive term and mean term
/// over every non-edge pair `i < j`, weighted equally.
pub fn exhaustive_topology_loss(a_hat: &Array2<f64>, positives: &[(usize, usize)]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Graph("topology loss is undefined for a graph without edges".into()));
    }
    let pos_set: HashSet<(usize, usize)> = positives.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    let pos = positives.iter().map(|&(i, j)| bce(a_hat[[i, j]], true)).sum::<f64>() / positives.len() as f64;
    let n = a_hat.nrows();
    let negs: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|p| !pos_set.contains(p))
        .map(|(i, j)| bce(a_hat[[i, j]], false))
        .collect();
    if negs.is_empty() {
        return Ok(pos);
    }
    Ok((pos + negs.iter().sum::<f64>() / negs.len() as f64) / 2.0)
}

/// `count` distinct pairs `i < j` drawn uniformly from those not in
/// `exclude` (fewer if not enough exist).
pub fn sample_negatives(n: usize, exclude: &HashSet<(usize, usize)>, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|p| !exclude.contains(p))
        .collect();
    let k = count.min(candidates.len());
    let mut picked: Vec<(usize, usize)> = sample(rng, candidates.len(), k).into_iter().map(|ix| candidates[ix]).collect();
    picked.sort_unstable();
    picked
}

pub fn joint_loss(tape: &mut Tape, physics_loss: Var, topology_loss: Var) -> Result<Var> {
    Ok(tape.add(physics_loss, topology_loss)?)
}

/// Handles to the three losses of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub joint: Var,
    pub physics: Var,
    pub topology: Var,
}

/// Builds the joint objective for one window: physics residual of each
/// observed state against the model's prediction of the next one (anchored
/// at the first window state), and edge cross-entropy at the target.
pub fn window_objective(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &TrainConfig,
    w: &WindowData,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> Result<Objective> {
    let f = model::forward(tape, bp, &cfg.model, w)?;
    let pairs: Vec<StatePair> = f
        .observed
        .iter()
        .zip(&f.predictions)
        .zip(&f.gaps)
        .map(|((&earlier, &later), &dt)| StatePair { earlier, later, dt })
        .collect();
    let a = match cfg.physics_adjacency {
        AdjacencySource::Predicted => f.adjacency,
        AdjacencySource::Observed => f.last_adjacency,
    };
    let phy = physics::physics_loss(tape, &pairs, f.observed[0], a, &cfg.physics)?;
    let top = topology_loss(tape, f.adjacency, positives, negatives)?;
    Ok(Objective {
        joint: joint_loss(tape, phy, top)?,
        physics: phy,
        topology: top,
    })
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter with a gradient in `grads`; parameters absent
    /// from `grads` are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
            let p = params.get(name)?;
            if p.numel() != g.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let p = params.get_mut(&name).expect("name taken from params").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let g = grads.get(&name);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub loss: Vec<f64>,
    pub loss_phy: Vec<f64>,
    pub loss_top: Vec<f64>,
}

/// Dataset dimensions the checkpoint was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub n_nodes: usize,
    pub feature_dim: usize,
    /// Index of the snapshot whose edges were split and predicted.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: BTreeMap<String, StoredTensor>,
    pub history: History,
    pub data: DataShape,
}

impl Checkpoint {
    pub fn model_params(&self) -> Result<ModelParams> {
        ModelParams::from_stored(self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("serializing checkpoint", e))
    }

    /// Writes to a temporary sibling file then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.to_json()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.join(format!(".{file_name}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

/// Losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub joint: f64,
    pub physics: f64,
    pub topology: f64,
}

/// Snapshot index used as the prediction target: the last one.
pub fn target_index(d: &TemporalGraphDataset) -> usize {
    d.horizon() - 1
}

fn pair_set(pairs: &[(usize, usize)]) -> HashSet<(usize, usize)> {
    pairs.iter().copied().collect()
}

fn collect_grads(grads: &netresil_autodiff::Gradients, bp: &BoundParams) -> BTreeMap<String, Vec<f64>> {
    bp.iter()
        .filter_map(|(name, var)| grads.get(var).map(|g| (name.to_string(), g.data().to_vec())))
        .collect()
}

pub fn train(d: &TemporalGraphDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(d, cfg, |_, _| {})
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each update.
pub fn train_with(d: &TemporalGraphDataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(usize, &EpochLoss)) -> Result<Checkpoint> {
    cfg.validate(true)?;
    let target = target_index(d);
    if d.horizon() < cfg.window + 1 {
        return Err(Error::Config(format!(
            "dataset has {} snapshots but a window of {} needs at least {}",
            d.horizon(),
            cfg.window,
            cfg.window + 1
        )));
    }
    let EdgeSplit { train: train_edges, .. } = split(d, cfg.split_ratio, cfg.seed)?;
    let n = d.node_count();

    // (window, positives, excluded pairs for negative sampling)
    let mut tasks = Vec::new();
    if cfg.sliding_windows {
        for t in cfg.window..target {
            let pos: Vec<(usize, usize)> = d.snapshots[t].graph.edges().iter().map(|&(i, j, _)| (i, j)).collect();
            if pos.is_empty() {
                continue;
            }
            let excl = pair_set(&pos);
            tasks.push((WindowData::from_dataset(d, t, cfg.window)?, pos, excl));
        }
    }
    let excl = pair_set(&train_edges);
    tasks.push((WindowData::from_dataset(d, target, cfg.window)?, train_edges, excl));

    let mut params = model::init_params(&cfg.model, d.feature_dim(), cfg.seed);
    let mut adam = Adam::new();
    let adam_cfg = AdamConfig::from(cfg);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let mut neg_rng = rng::stream(cfg.seed, rng::NEGATIVES, epoch as u64);
        let mut objectives = Vec::with_capacity(tasks.len());
        for (w, pos, excl) in &tasks {
            let count = (cfg.model.topo.negative_ratio * pos.len() as f64).round() as usize;
            let neg = sample_negatives(n, excl, count, &mut neg_rng);
            objectives.push(window_objective(&mut tape, &bp, cfg, w, pos, &neg)?);
        }
        let scale = 1.0 / objectives.len() as f64;
        let sum = |tape: &mut Tape, pick: fn(&Objective) -> Var| -> Result<Var> {
            let mut acc = pick(&objectives[0]);
            for o in &objectives[1..] {
                acc = tape.add(acc, pick(o))?;
            }
            Ok(tape.mul_scalar(acc, scale))
        };
        let joint = sum(&mut tape, |o| o.joint)?;
        let phy = sum(&mut tape, |o| o.physics)?;
        let top = sum(&mut tape, |o| o.topology)?;
        let losses = EpochLoss {
            joint: tape.value(joint).item(),
            physics: tape.value(phy).item(),
            topology: tape.value(top).item(),
        };
        if !losses.joint.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: format!("joint loss is {}", losses.joint),
            });
        }
        let grads = tape.backward(joint)?;
        let grads = collect_grads(&grads, &bp);
        adam.step(&mut params, &grads, &adam_cfg).map_err(|e| match e {
            Error::NonFiniteGradient { name } => Error::TrainingDiverged {
                epoch,
                reason: format!("non-finite gradient for parameter `{name}`"),
            },
            other => other,
        })?;
        history.loss.push(losses.joint);
        history.loss_phy.push(losses.physics);
        history.loss_top.push(losses.topology);
        on_epoch(epoch, &losses);
    }
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        params: params.to_stored(),
        history,
        data: DataShape {
            n_nodes: n,
            feature_dim: d.feature_dim(),
            target,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use netresil_autodiff::Tensor;

    #[test]
    fn topology_loss_examples() {
        let half = Array2::from_elem((3, 3), 0.5);
        let l = topology_loss_values(&half, &[(0, 1)], &[(0, 2), (1, 2)]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let a = array![[0.0, 0.9, 0.9], [0.9, 0.0, 0.0], [0.9, 0.0, 0.0]];
        let l = topology_loss_values(&a, &[(0, 1)], &[(0, 2)]).unwrap();
        assert!((l - (-(0.9f64.ln()) - 0.1f64.ln()) / 2.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![3, 3], a.iter().copied().collect()).unwrap());
        let t = topology_loss(&mut tape, v, &[(0, 1)], &[(0, 2)]).unwrap();
        assert!((tape.value(t).item() - l).abs() < 1e-15);
        assert!(topology_loss_values(&a, &[], &[(0, 2)]).is_err());
    }

    #[test]
    fn perfect_predictions_near_zero_loss() {
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(topology_loss_values(&a, &[(0, 1)], &[(0, 2), (1, 2)]).unwrap() < 1e-6);
    }

    #[test]
    fn negatives_avoid_excluded_pairs() {
        let excl: HashSet<_> = [(0, 1), (2, 3)].into_iter().collect();
        let mut rng = rng::stream(1, rng::NEGATIVES, 0);
        let neg = sample_negatives(5, &excl, 100, &mut rng);
        assert_eq!(neg.len(), 8);
        assert!(neg.iter().all(|p| !excl.contains(p) && p.0 < p.1));
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0]).unwrap());
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = Adam::new();
        let zero: BTreeMap<_, _> = [("w".to_string(), vec![0.0, 0.0])].into_iter().collect();
        adam.step(&mut p, &zero, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);

        let mut adam = Adam::new();
        let g: BTreeMap<_, _> = [("w".to_string(), vec![0.5, -3.0])].into_iter().collect();
        adam.step(&mut p, &g, &cfg).unwrap();
        // First bias-corrected step is lr * g / (|g| + eps).
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((w[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);

        let nan: BTreeMap<_, _> = [("w".to_string(), vec![f64::NAN, 0.0])].into_iter().collect();
        match adam.step(&mut p, &nan, &cfg) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
