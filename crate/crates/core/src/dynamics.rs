//! Ground-truth node dynamics `du_i/dt = F(u_i) + sum_j A_ij G(u_i, u_j)`,
//! fixed-step RK4 integration, node attacks and resilience classification.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;

pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_T_END: f64 = 50.0;
pub const DEFAULT_CONVERGENCE_EPS: f64 = 1e-4;
/// Resilience threshold as a fraction of the unperturbed steady mean.
pub const DEFAULT_THETA_FRACTION: f64 = 0.1;

/// Self-dynamics `F` and pairwise interaction `G` of a node system. Vector
/// states apply the scalar law independently per feature channel.
pub trait NodeDynamics {
    fn id(&self) -> &str;
    fn self_rate(&self, x: f64) -> f64;
    fn interaction(&self, xi: f64, xj: f64) -> f64;
    /// Whether states are clamped to be non-negative after every step.
    fn clamps_nonnegative(&self) -> bool {
        false
    }
}

/// Mutualistic population dynamics:
/// `F(x) = B + x (1 - x/K)(x/C - 1)`, `G(xi, xj) = xi xj / (D + E xi + H xj)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutualisticParams {
    pub b: f64,
    pub c: f64,
    pub k: f64,
    pub d: f64,
    pub e: f64,
    pub h: f64,
}

impl Default for MutualisticParams {
    fn default() -> Self {
        Self {
            b: 0.1,
            c: 1.0,
            k: 5.0,
            d: 5.0,
            e: 0.9,
            h: 0.1,
        }
    }
}

/// Serializable dynamics families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    Mutualistic(MutualisticParams),
    /// `F = 0`, `G(xi, xj) = rate (xj - xi)`.
    LinearDiffusion { rate: f64 },
}

impl Default for Dynamics {
    fn default() -> Self {
        Self::Mutualistic(MutualisticParams::default())
    }
}

impl NodeDynamics for Dynamics {
    fn id(&self) -> &str {
        match self {
            Self::Mutualistic(_) => "mutualistic",
            Self::LinearDiffusion { .. } => "linear_diffusion",
        }
    }

    fn self_rate(&self, x: f64) -> f64 {
        match self {
            Self::Mutualistic(p) => p.b + x * (1.0 - x / p.k) * (x / p.c - 1.0),
            Self::LinearDiffusion { .. } => 0.0,
        }
    }

    fn interaction(&self, xi: f64, xj: f64) -> f64 {
        match self {
            Self::Mutualistic(p) => xi * xj / (p.d + p.e * xi + p.h * xj),
            Self::LinearDiffusion { rate } => rate * (xj - xi),
        }
    }

    fn clamps_nonnegative(&self) -> bool {
        matches!(self, Self::Mutualistic(_))
    }
}

/// User-supplied `F` and `G`.
pub struct CustomDynamics<F, G> {
    pub self_dynamics: F,
    pub interaction: G,
}

impl<F, G> NodeDynamics for CustomDynamics<F, G>
where
    F: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64,
{
    fn id(&self) -> &str {
        "custom"
    }

    fn self_rate(&self, x: f64) -> f64 {
        (self.self_dynamics)(x)
    }

    fn interaction(&self, xi: f64, xj: f64) -> f64 {
        (self.interaction)(xi, xj)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
    pub dynamics_id: String,
    pub dt: f64,
    pub integrator: &'static str,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    /// Restriction to the given node rows.
    pub fn select_nodes(&self, nodes: &[usize]) -> Self {
        Self {
            times: self.times.clone(),
            states: self.states.iter().map(|s| s.select(Axis(0), nodes)).collect(),
            dynamics_id: self.dynamics_id.clone(),
            dt: self.dt,
            integrator: self.integrator,
        }
    }
}

/// Step and sampling controls for [`integrate_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Record every `sample_every`-th step. The last two steps are always
    /// recorded so the terminal derivative can be estimated.
    pub sample_every: usize,
}

impl IntegrateOptions {
    pub fn every_step(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            sample_every: 1,
        }
    }
}

/// One classical RK4 step of `du/dt = field(u)`.
pub fn rk4_step(field: &mut impl FnMut(&Array2<f64>) -> Array2<f64>, u: &Array2<f64>, dt: f64) -> Array2<f64> {
    let k1 = field(u);
    let k2 = field(&(u + &(&k1 * (dt / 2.0))));
    let k3 = field(&(u + &(&k2 * (dt / 2.0))));
    let k4 = field(&(u + &(&k3 * dt)));
    u + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (dt / 6.0))
}

/// Fixed-step RK4 integration of an arbitrary autonomous field. The
/// `post_step` hook may project the state (for example onto `u >= 0`).
pub fn rk4_integrate(
    mut field: impl FnMut(&Array2<f64>) -> Array2<f64>,
    u0: &Array2<f64>,
    opts: IntegrateOptions,
    post_step: impl Fn(&mut Array2<f64>),
) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
    if !(opts.dt > 0.0) || !(opts.t_end >= 0.0) {
        return Err(Error::Config(format!(
            "integration needs dt > 0 and t_end >= 0 (dt = {}, t_end = {})",
            opts.dt, opts.t_end
        )));
    }
    if let Some(pos) = u0.iter().position(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            time: 0.0,
            node: pos / u0.ncols().max(1),
        });
    }
    let steps = (opts.t_end / opts.dt).round() as usize;
    let every = opts.sample_every.max(1);
    let mut times = vec![0.0];
    let mut states = vec![u0.clone()];
    let mut u = u0.clone();
    for step in 1..=steps {
        u = rk4_step(&mut field, &u, opts.dt);
        post_step(&mut u);
        let t = step as f64 * opts.dt;
        if let Some(pos) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: t,
                node: pos / u.ncols().max(1),
            });
        }
        if step % every == 0 || step + 1 >= steps {
            times.push(t);
            states.push(u.clone());
        }
    }
    Ok((times, states))
}

/// Right-hand side `F(u_i) + sum_j A_ij G(u_i, u_j)` per channel.
pub fn node_field(g: &Graph, spec: &dyn NodeDynamics, u: &Array2<f64>) -> Array2<f64> {
    let neighbors = adjacency_lists(g);
    field_with_lists(&neighbors, spec, u)
}

fn adjacency_lists(g: &Graph) -> Vec<Vec<(usize, f64)>> {
    let a = g.adjacency();
    (0..g.node_count())
        .map(|i| {
            a.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (j, w))
                .collect()
        })
        .collect()
}

fn field_with_lists(neighbors: &[Vec<(usize, f64)>], spec: &dyn NodeDynamics, u: &Array2<f64>) -> Array2<f64> {
    let (n, m) = u.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for c in 0..m {
            let xi = u[[i, c]];
            let coupling: f64 = neighbors[i]
                .iter()
                .map(|&(j, w)| w * spec.interaction(xi, u[[j, c]]))
                .sum();
            out[[i, c]] = spec.self_rate(xi) + coupling;
        }
    }
    out
}

fn check_states(g: &Graph, u0: &Array2<f64>) -> Result<()> {
    if u0.nrows() != g.node_count() || u0.ncols() == 0 {
        return Err(Error::Shape {
            op: "integrate",
            left: vec![g.node_count(), g.node_count()],
            right: u0.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn integrate_with(g: &Graph, spec: &dyn NodeDynamics, u0: &Array2<f64>, opts: IntegrateOptions) -> Result<Trajectory> {
    check_states(g, u0)?;
    let neighbors = adjacency_lists(g);
    let clamp = spec.clamps_nonnegative();
    let (times, states) = rk4_integrate(
        |u| field_with_lists(&neighbors, spec, u),
        u0,
        opts,
        |u| {
            if clamp {
                u.mapv_inplace(|v| v.max(0.0));
            }
        },
    )?;
    Ok(Trajectory {
        times,
        states,
        dynamics_id: spec.id().to_string(),
        dt: opts.dt,
        integrator: "rk4",
    })
}

/// Integrates recording every step.
pub fn integrate(g: &Graph, spec: &dyn NodeDynamics, u0: &Array2<f64>, dt: f64, t_end: f64) -> Result<Trajectory> {
    integrate_with(g, spec, u0, IntegrateOptions::every_step(dt, t_end))
}

/// Result of a node attack: the damaged graph and states plus the removed
/// node indices (ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct Attacked {
    pub graph: Graph,
    pub states: Array2<f64>,
    pub removed: Vec<usize>,
}

impl Attacked {
    pub fn survivors(&self) -> Vec<usize> {
        let mut keep = vec![true; self.graph.node_count()];
        for &r in &self.removed {
            keep[r] = false;
        }
        (0..keep.len()).filter(|&i| keep[i]).collect()
    }
}

/// Nodes hit by an attack of the given fraction: exactly
/// `round(fraction * n)` distinct nodes drawn uniformly, ascending. The
/// draw is a prefix of one seeded permutation, so for a fixed seed a larger
/// fraction removes a superset of the nodes removed by a smaller one.
pub fn attacked_nodes(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("attack fraction {fraction} outside [0, 1]")));
    }
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::ATTACK, 0));
    let mut nodes = order[..k].to_vec();
    nodes.sort_unstable();
    Ok(nodes)
}

fn remove_nodes(g: &Graph, nodes: &[usize]) -> Graph {
    let mut a = g.adjacency().clone();
    for &r in nodes {
        a.row_mut(r).fill(0.0);
        a.column_mut(r).fill(0.0);
    }
    if g.is_directed() {
        Graph::directed(a).expect("removing edges keeps a valid adjacency")
    } else {
        Graph::undirected(a).expect("removing edges keeps a valid adjacency")
    }
}

/// Zeroes the state rows of the attacked nodes and disconnects them. Nodes
/// stay in place so the node count is unchanged.
pub fn attack(g: &Graph, states: &Array2<f64>, fraction: f64, seed: u64) -> Result<Attacked> {
    check_states(g, states)?;
    let removed = attacked_nodes(g.node_count(), fraction, seed)?;
    let mut damaged = states.clone();
    for &r in &removed {
        damaged.row_mut(r).fill(0.0);
    }
    Ok(Attacked {
        graph: remove_nodes(g, &removed),
        states: damaged,
        removed,
    })
}

/// Applies one attack (same node set) to every snapshot of a dataset.
pub fn attack_dataset(
    d: &crate::dataset::TemporalGraphDataset,
    fraction: f64,
    seed: u64,
) -> Result<(crate::dataset::TemporalGraphDataset, Vec<usize>)> {
    let removed = attacked_nodes(d.node_count(), fraction, seed)?;
    let mut out = d.clone();
    for s in &mut out.snapshots {
        s.graph = remove_nodes(&s.graph, &removed);
        for &r in &removed {
            s.states.row_mut(r).fill(0.0);
        }
    }
    Ok((out, removed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResilienceVerdict {
    pub resilient: bool,
    pub steady_mean: f64,
    pub converged: bool,
    pub derivative_norm_at_end: f64,
}

/// Converged when the max-abs finite-difference derivative over the last two
/// samples is below `eps`; resilient when also the final mean exceeds `theta`.
pub fn classify_resilience(traj: &Trajectory, theta: f64, eps: f64) -> Result<ResilienceVerdict> {
    let k = traj.states.len();
    if k < 2 {
        return Err(Error::Config("classification needs at least two samples".into()));
    }
    let (last, prev) = (&traj.states[k - 1], &traj.states[k - 2]);
    let h = traj.times[k - 1] - traj.times[k - 2];
    let derivative_norm_at_end = last
        .iter()
        .zip(prev.iter())
        .map(|(a, b)| ((a - b) / h).abs())
        .fold(0.0, f64::max);
    let steady_mean = last.mean().unwrap_or(0.0);
    let converged = derivative_norm_at_end < eps;
    Ok(ResilienceVerdict {
        resilient: converged && steady_mean > theta,
        steady_mean,
        converged,
        derivative_norm_at_end,
    })
}

/// Cross-node mean state over time after an attack.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryCurve {
    pub fraction: f64,
    pub removed: Vec<usize>,
    pub times: Vec<f64>,
    /// Mean over surviving nodes and channels.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Trajectory restricted to surviving nodes.
    pub survivors: Trajectory,
}

fn mean_std(s: &Array2<f64>) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.sum() / n;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Attacks then integrates, once per fraction. Removed nodes are excluded
/// from the mean; with fraction 0 the curve is the unperturbed baseline.
pub fn recovery_curve(
    g: &Graph,
    spec: &dyn NodeDynamics,
    u0: &Array2<f64>,
    fractions: &[f64],
    opts: IntegrateOptions,
    seed: u64,
) -> Result<Vec<RecoveryCurve>> {
    fractions
        .iter()
        .map(|&fraction| {
            let hit = attack(g, u0, fraction, seed)?;
            let survivors = hit.survivors();
            let traj = integrate_with(&hit.graph, spec, &hit.states, opts)?;
            let sub = if survivors.is_empty() {
                traj.select_nodes(&(0..g.node_count()).collect::<Vec<_>>())
            } else {
                traj.select_nodes(&survivors)
            };
            let (mean, std): (Vec<f64>, Vec<f64>) = sub.states.iter().map(mean_std).unzip();
            Ok(RecoveryCurve {
                fraction,
                removed: hit.removed,
                times: sub.times.clone(),
                mean,
                std,
                survivors: sub,
            })
        })
        .collect()
}

/// CSV with header `fraction,t,mean_state,std_state`.
pub fn curves_to_csv(curves: &[RecoveryCurve]) -> String {
    let mut out = String::from("fraction,t,mean_state,std_state\n");
    for c in curves {
        for ((t, m), s) in c.times.iter().zip(&c.mean).zip(&c.std) {
            out.push_str(&format!("{},{},{},{}\n", c.fraction, t, m, s));
        }
    }
    out
}
