//! Classification and regression metrics, checkpoint evaluation against the
//! persistence and degree-product baselines, multi-seed summaries, and the
//! node-attack recovery experiment.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::TemporalGraphDataset;
use crate::dynamics::{
    self, classify_resilience, recovery_curve, IntegrateOptions, NodeDynamics, RecoveryCurve, ResilienceVerdict,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, WindowData};
use crate::rng;
use crate::synth::split_at;
use crate::trainer::{sample_negatives, Checkpoint};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FRACTIONS: [f64; 4] = [0.05, 0.10, 0.20, 0.50];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassificationCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn classification_metrics(c: &ClassificationCounts) -> ClassificationMetrics {
    let mut degenerate = Vec::new();
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let acc = ratio(tp + tn, tp + tn + fp + fn_, "acc", &mut degenerate);
    let precision = ratio(tp, tp + fp, "precision", &mut degenerate);
    let recall = ratio(tp, tp + fn_, "recall", &mut degenerate);
    let f1 = ratio(2.0 * precision * recall, precision + recall, "f1", &mut degenerate);
    ClassificationMetrics {
        acc,
        precision,
        recall,
        f1,
        degenerate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    /// Mean absolute error per entry.
    pub mae: f64,
    /// Root of the mean squared error per entry.
    pub rmse: f64,
    /// Mean over nodes of the L2 norm of each node's error vector.
    pub rmse_paper: f64,
}

pub fn regression_metrics(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<RegressionMetrics> {
    if pred.dim() != truth.dim() || pred.is_empty() {
        return Err(Error::Shape {
            op: "regression_metrics",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let err = pred - truth;
    let n = err.nrows() as f64;
    let mae = err.iter().map(|v| v.abs()).sum::<f64>() / err.len() as f64;
    let rmse = (err.iter().map(|v| v * v).sum::<f64>() / err.len() as f64).sqrt();
    let rmse_paper = err.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n;
    Ok(RegressionMetrics { mae, rmse, rmse_paper })
}

/// Counts at `threshold` (a score `>= threshold` predicts an edge).
pub fn count_predictions(
    scores: &Array2<f64>,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    threshold: f64,
) -> ClassificationCounts {
    let mut c = ClassificationCounts::default();
    for &(i, j) in positives {
        if scores[[i, j]] >= threshold {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    for &(i, j) in negatives {
        if scores[[i, j]] >= threshold {
            c.fp += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

/// Chung-Lu edge probabilities `d_i d_j / 2|E|` (capped at 1) from the
/// binary structure of `g`.
pub fn degree_product_scores(g: &Graph) -> Array2<f64> {
    let n = g.node_count();
    let deg: Vec<f64> = (0..n).map(|i| g.neighbors(i).len() as f64).collect();
    let two_m: f64 = deg.iter().sum();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j || two_m == 0.0 {
            0.0
        } else {
            (deg[i] * deg[j] / two_m).min(1.0)
        }
    })
}

/// Median of `scores` over the given pairs. With balanced positives and
/// negatives this is the threshold that labels half of the pairs as edges.
pub fn median_pair_score(scores: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    let mut v: Vec<f64> = pairs.iter().map(|&(i, j)| scores[[i, j]]).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    #[default]
    Test,
}

/// Evaluation of one checkpoint under one negative-sampling seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub seed: u64,
    pub counts: ClassificationCounts,
    pub topology: ClassificationMetrics,
    pub state: RegressionMetrics,
    pub persistence: RegressionMetrics,
    pub degree_product: ClassificationMetrics,
}

/// Held-out positives (per the checkpoint's split) against an equal number of
/// true non-edges of the target snapshot sampled with `eval_seed`.
pub fn evaluation_pairs(
    ck: &Checkpoint,
    d: &TemporalGraphDataset,
    which: EvalSplit,
    eval_seed: u64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let s = split_at(d, ck.data.target, ck.config.split_ratio, ck.config.seed)?;
    let positives = match which {
        EvalSplit::Train => s.train,
        EvalSplit::Test => s.test,
    };
    let all: HashSet<(usize, usize)> = target_edges(d, ck.data.target);
    let mut r = rng::stream(eval_seed, rng::EVAL, 0);
    let negatives = sample_negatives(d.node_count(), &all, positives.len(), &mut r);
    Ok((positives, negatives))
}

fn target_edges(d: &TemporalGraphDataset, target: usize) -> HashSet<(usize, usize)> {
    d.snapshots[target].graph.edges().iter().map(|&(i, j, _)| (i, j)).collect()
}

pub fn check_compatible(ck: &Checkpoint, d: &TemporalGraphDataset) -> Result<()> {
    if ck.data.n_nodes != d.node_count() || ck.data.feature_dim != d.feature_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects N = {}, M = {} but dataset has N = {}, M = {}",
            ck.data.n_nodes,
            ck.data.feature_dim,
            d.node_count(),
            d.feature_dim()
        )));
    }
    if ck.data.target >= d.horizon() || ck.data.target < ck.config.window {
        return Err(Error::Config(format!(
            "checkpoint target snapshot {} does not fit a dataset of horizon {}",
            ck.data.target,
            d.horizon()
        )));
    }
    Ok(())
}

/// Model predictions for the checkpoint's target snapshot.
pub fn checkpoint_predictions(ck: &Checkpoint, d: &TemporalGraphDataset) -> Result<(Array2<f64>, Array2<f64>)> {
    check_compatible(ck, d)?;
    let params = ck.model_params()?;
    let w = WindowData::from_dataset(d, ck.data.target, ck.config.window)?;
    model::predict(&params, &ck.config.model, &w)
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    d: &TemporalGraphDataset,
    which: EvalSplit,
    threshold: f64,
    eval_seeds: &[u64],
) -> Result<Vec<RunEvaluation>> {
    let (u_hat, a_hat) = checkpoint_predictions(ck, d)?;
    let target = ck.data.target;
    let truth = &d.snapshots[target].states;
    let state = regression_metrics(&u_hat, truth)?;
    let persistence = regression_metrics(&d.snapshots[target - 1].states, truth)?;
    let dp_scores = degree_product_scores(&d.snapshots[target - 1].graph);
    eval_seeds
        .iter()
        .map(|&seed| {
            let (pos, neg) = evaluation_pairs(ck, d, which, seed)?;
            let counts = count_predictions(&a_hat, &pos, &neg, threshold);
            let all: Vec<(usize, usize)> = pos.iter().chain(&neg).copied().collect();
            let dp = count_predictions(&dp_scores, &pos, &neg, median_pair_score(&dp_scores, &all));
            Ok(RunEvaluation {
                seed,
                counts,
                topology: classification_metrics(&counts),
                state,
                persistence,
                degree_product: classification_metrics(&dp),
            })
        })
        .collect()
}

/// Per-seed values with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// `None` with fewer than two values.
    pub std: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub degenerate: bool,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / n };
        let std = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self {
            degenerate: std.is_none(),
            per_seed: values,
            mean,
            std,
        }
    }

    /// `mean ± std` with the given number of decimals.
    pub fn display(&self, decimals: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*} ± {:.*}", decimals, self.mean, decimals, s),
            None => format!("{:.*}", decimals, self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub baselines: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

const METRIC_NAMES: [&str; 7] = ["acc", "f1", "precision", "recall", "mae", "rmse", "rmse_paper"];

fn metric_row(r: &RunEvaluation) -> [f64; 7] {
    [
        r.topology.acc,
        r.topology.f1,
        r.topology.precision,
        r.topology.recall,
        r.state.mae,
        r.state.rmse,
        r.state.rmse_paper,
    ]
}

/// Aggregates runs in the order given. `seeds` labels them.
pub fn multi_run_report(runs: &[RunEvaluation], seeds: &[u64], config_digest: &str) -> MetricsReport {
    let col = |f: &dyn Fn(&RunEvaluation) -> f64| MetricSummary::from_values(runs.iter().map(f).collect());
    let metrics = METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| (name.to_string(), col(&|r| metric_row(r)[k])))
        .collect();
    let mut baselines = BTreeMap::new();
    baselines.insert(
        "persistence".to_string(),
        [
            ("mae".to_string(), col(&|r| r.persistence.mae)),
            ("rmse".to_string(), col(&|r| r.persistence.rmse)),
            ("rmse_paper".to_string(), col(&|r| r.persistence.rmse_paper)),
        ]
        .into_iter()
        .collect(),
    );
    baselines.insert(
        "degree_product".to_string(),
        [
            ("acc".to_string(), col(&|r| r.degree_product.acc)),
            ("f1".to_string(), col(&|r| r.degree_product.f1)),
            ("precision".to_string(), col(&|r| r.degree_product.precision)),
            ("recall".to_string(), col(&|r| r.degree_product.recall)),
        ]
        .into_iter()
        .collect(),
    );
    MetricsReport {
        seeds: seeds.to_vec(),
        config_digest: config_digest.to_string(),
        metrics,
        baselines,
    }
}

/// Per-fraction summary of an attack run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionOutcome {
    pub fraction: f64,
    pub removed: usize,
    pub verdict: ResilienceVerdict,
    /// Final survivor mean over the unperturbed final mean.
    pub recovery_ratio: f64,
    /// First time the survivor mean reaches 90% of the unperturbed steady
    /// mean (linear interpolation between samples); `None` if never.
    pub time_to_90: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub baseline_mean: f64,
    pub curves: Vec<RecoveryCurve>,
    pub outcomes: Vec<FractionOutcome>,
}

impl AttackReport {
    pub fn csv(&self) -> String {
        dynamics::curves_to_csv(&self.curves)
    }

    pub fn outcome(&self, fraction: f64) -> Option<&FractionOutcome> {
        self.outcomes.iter().find(|o| o.fraction == fraction)
    }
}

/// Interpolated first crossing of `level` by `values` over `times`.
pub fn first_crossing(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    if values.first().is_some_and(|&v| v >= level) {
        return Some(times[0]);
    }
    for k in 1..values.len() {
        if values[k] >= level {
            let (v0, v1) = (values[k - 1], values[k]);
            let s = if v1 > v0 { (level - v0) / (v1 - v0) } else { 1.0 };
            return Some(times[k - 1] + s * (times[k] - times[k - 1]));
        }
    }
    None
}

/// Thresholds for [`attack_experiment`] verdicts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerdictOptions {
    /// Resilience threshold as a fraction of the unperturbed steady mean.
    pub theta_fraction: f64,
    pub eps: f64,
}

impl Default for VerdictOptions {
    fn default() -> Self {
        Self {
            theta_fraction: dynamics::DEFAULT_THETA_FRACTION,
            eps: dynamics::DEFAULT_CONVERGENCE_EPS,
        }
    }
}

fn summarize(curves: Vec<RecoveryCurve>, baseline: &RecoveryCurve, v: VerdictOptions) -> Result<AttackReport> {
    let baseline_mean = *baseline.mean.last().expect("curves are non-empty");
    let theta = v.theta_fraction * baseline_mean;
    let outcomes = curves
        .iter()
        .map(|c| {
            let final_mean = *c.mean.last().expect("curves are non-empty");
            Ok(FractionOutcome {
                fraction: c.fraction,
                removed: c.removed.len(),
                verdict: classify_resilience(&c.survivors, theta, v.eps)?,
                recovery_ratio: if baseline_mean == 0.0 { 0.0 } else { final_mean / baseline_mean },
                time_to_90: first_crossing(&c.times, &c.mean, 0.9 * baseline_mean),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport {
        baseline_mean,
        curves,
        outcomes,
    })
}

/// Attacks the initial state of a ground-truth simulation at every fraction
/// (plus an unperturbed run for reference) and integrates to `opts.t_end`.
pub fn attack_simulation(
    g: &Graph,
    spec: &dyn NodeDynamics,
    u0: &Array2<f64>,
    fractions: &[f64],
    seed: u64,
    opts: IntegrateOptions,
    v: VerdictOptions,
) -> Result<AttackReport> {
    let baseline = recovery_curve(g, spec, u0, &[0.0], opts, seed)?.remove(0);
    let curves = recovery_curve(g, spec, u0, fractions, opts, seed)?;
    summarize(curves, &baseline, v)
}

/// Attacks the last input window of a trained model and rolls its state
/// predictor forward `steps` times, feeding each prediction back in. The
/// attacked nodes stay zeroed and disconnected throughout.
pub fn attack_checkpoint(
    ck: &Checkpoint,
    d: &TemporalGraphDataset,
    fractions: &[f64],
    seed: u64,
    steps: usize,
    v: VerdictOptions,
) -> Result<AttackReport> {
    check_compatible(ck, d)?;
    let params = ck.model_params()?;
    let base_window = WindowData::from_dataset(d, ck.data.target, ck.config.window)?;
    let run = |fraction: f64| -> Result<RecoveryCurve> {
        let (attacked, removed) = dynamics::attack_dataset(d, fraction, seed)?;
        let mut w = WindowData::from_dataset(&attacked, ck.data.target, ck.config.window)?;
        let gap = base_window.gaps().last().copied().unwrap_or(1.0);
        let survivors: Vec<usize> = (0..d.node_count()).filter(|i| !removed.contains(i)).collect();
        let mut times = vec![w.times[w.len() - 1]];
        let mut states = vec![w.states[w.len() - 1].clone()];
        for _ in 0..steps {
            let (mut next, _) = model::predict(&params, &ck.config.model, &w)?;
            for &r in &removed {
                next.row_mut(r).fill(0.0);
            }
            if let Some(pos) = next.iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    time: w.target_time,
                    node: pos / next.ncols(),
                });
            }
            times.push(w.target_time);
            states.push(next.clone());
            w.states.remove(0);
            w.states.push(next);
            let (a, s) = (w.adjacency[w.len() - 1].clone(), w.norm_adjacency[w.len() - 1].clone());
            w.adjacency.remove(0);
            w.adjacency.push(a);
            w.norm_adjacency.remove(0);
            w.norm_adjacency.push(s);
            w.times.remove(0);
            w.times.push(w.target_time);
            w.target_time += gap;
        }
        let traj = Trajectory {
            times: times.clone(),
            states,
            dynamics_id: "learned".into(),
            dt: gap,
            integrator: "autoregressive",
        };
        let keep = if survivors.is_empty() { (0..d.node_count()).collect() } else { survivors };
        let sub = traj.select_nodes(&keep);
        let (mean, std) = sub
            .states
            .iter()
            .map(|s| {
                let m = s.mean().unwrap_or(0.0);
                let var = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64;
                (m, var.sqrt())
            })
            .unzip();
        Ok(RecoveryCurve {
            fraction,
            removed,
            times,
            mean,
            std,
            survivors: sub,
        })
    };
    let baseline = run(0.0)?;
    let curves = fractions.iter().map(|&f| run(f)).collect::<Result<Vec<_>>>()?;
    summarize(curves, &baseline, v)
}
