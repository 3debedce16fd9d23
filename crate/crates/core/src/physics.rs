//! Symbolic node-dynamics law and the residual loss that ties predicted
//! state trajectories to it.
//!
//! The right-hand side for node `i` is
//!
//! ```text
//! alpha (u_i - u_i^0) + beta (L U)_i
//!     + gamma sum_{j in N(i)} sum_{k in N(j)} A_jk / sqrt(D~_jj D~_kk) (u_k - u_j)
//! ```
//!
//! with `L = D - A` and `D~` the self-loop augmented degree. Weighted
//! adjacencies enter through `A_ij` as the weight of `j in N(i)`.

use ndarray::Array2;
use netresil_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_integrate, IntegrateOptions};
use crate::error::{Error, Result};
use crate::graph::{laplacian_apply, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            alpha: -0.2,
            beta: -0.5,
            gamma: -0.1,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("physics parameters must be finite: {self:?}")))
        }
    }
}

fn check_same(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Right-hand side evaluated on a fixed graph (directed graphs are
/// symmetrized first).
pub fn node_dynamics_rhs(u_t: &Array2<f64>, u_0: &Array2<f64>, g: &Graph, p: &PhysicsParams) -> Result<Array2<f64>> {
    check_same("node_dynamics_rhs", u_t, u_0)?;
    if u_t.nrows() != g.node_count() {
        return Err(Error::Shape {
            op: "node_dynamics_rhs",
            left: vec![g.node_count(), g.node_count()],
            right: u_t.shape().to_vec(),
        });
    }
    let a = g.symmetric_adjacency();
    rhs_dense(u_t, u_0, &a, p)
}

/// Same law on an arbitrary dense non-negative adjacency.
pub fn rhs_dense(u_t: &Array2<f64>, u_0: &Array2<f64>, a: &Array2<f64>, p: &PhysicsParams) -> Result<Array2<f64>> {
    check_same("rhs_dense", u_t, u_0)?;
    let n = u_t.nrows();
    let lap = {
        let deg = a.sum_axis(ndarray::Axis(1));
        let mut l = -a.clone();
        for i in 0..n {
            l[[i, i]] += deg[i];
        }
        l
    };
    let lu = laplacian_apply(&lap, u_t)?;
    let aug_deg: Vec<f64> = (0..n).map(|j| a.row(j).sum() + 1.0).collect();
    let m = u_t.ncols();
    // R_j = sum_k A_jk / sqrt(D~_jj D~_kk) (u_k - u_j)
    let mut r = Array2::<f64>::zeros((n, m));
    for j in 0..n {
        for k in 0..n {
            let w = a[[j, k]];
            if w == 0.0 {
                continue;
            }
            let s = w / (aug_deg[j] * aug_deg[k]).sqrt();
            for c in 0..m {
                r[[j, c]] += s * (u_t[[k, c]] - u_t[[j, c]]);
            }
        }
    }
    let two_hop = a.dot(&r);
    Ok((u_t - u_0) * p.alpha + lu * p.beta + two_hop * p.gamma)
}

/// Integrates the law itself with RK4 on a fixed graph, anchoring the
/// auto-dynamics term at `u_0`.
pub fn simulate(g: &Graph, u_0: &Array2<f64>, p: &PhysicsParams, opts: IntegrateOptions) -> Result<(Vec<f64>, Vec<Array2<f64>>)> {
    if u_0.nrows() != g.node_count() {
        return Err(Error::Shape {
            op: "simulate",
            left: vec![g.node_count(), g.node_count()],
            right: u_0.shape().to_vec(),
        });
    }
    let a = g.symmetric_adjacency();
    rk4_integrate(
        |u| rhs_dense(u, u_0, &a, p).expect("shapes fixed at entry"),
        u_0,
        opts,
        |_| {},
    )
}

/// Tape version of [`rhs_dense`] with a differentiable `[N, N]` adjacency.
pub fn rhs_on_tape(tape: &mut Tape, u_t: Var, u_0: Var, a_hat: Var, p: &PhysicsParams) -> Result<Var> {
    let deg = tape.sum_last(a_hat);
    let du = tape.scale_rows(u_t, deg)?;
    let au = tape.matmul(a_hat, u_t)?;
    let lu = tape.sub(du, au)?;

    let aug = tape.add_scalar(deg, 1.0);
    let root = tape.sqrt(aug);
    let dinv = tape.recip(root);
    let rows = tape.scale_rows(a_hat, dinv)?;
    let rows_t = tape.transpose(rows)?;
    let both_t = tape.scale_rows(rows_t, dinv)?;
    let s = tape.transpose(both_t)?;
    let su = tape.matmul(s, u_t)?;
    let s_deg = tape.sum_last(s);
    let self_part = tape.scale_rows(u_t, s_deg)?;
    let r = tape.sub(su, self_part)?;
    let two_hop = tape.matmul(a_hat, r)?;

    let drift = tape.sub(u_t, u_0)?;
    let t1 = tape.mul_scalar(drift, p.alpha);
    let t2 = tape.mul_scalar(lu, p.beta);
    let t3 = tape.mul_scalar(two_hop, p.gamma);
    let partial = tape.add(t1, t2)?;
    Ok(tape.add(partial, t3)?)
}

/// Two consecutive states and the time between them.
#[derive(Clone, Copy, Debug)]
pub struct StatePair {
    pub earlier: Var,
    pub later: Var,
    pub dt: f64,
}

/// Mean squared forward-difference residual, averaged over all pairs.
pub fn physics_loss(tape: &mut Tape, pairs: &[StatePair], u_0: Var, a_hat: Var, p: &PhysicsParams) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Config("physics loss needs at least one state pair".into()));
    }
    if let Some(bad) = pairs.iter().find(|s| !(s.dt > 0.0)) {
        return Err(Error::Config(format!("physics loss needs dt > 0, got {}", bad.dt)));
    }
    let mut total: Option<Var> = None;
    for pair in pairs {
        let diff = tape.sub(pair.later, pair.earlier)?;
        let rate = tape.mul_scalar(diff, 1.0 / pair.dt);
        let rhs = rhs_on_tape(tape, pair.earlier, u_0, a_hat, p)?;
        let res = tape.sub(rate, rhs)?;
        let sq = tape.square(res);
        let m = tape.mean(sq);
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok(tape.mul_scalar(total.unwrap(), 1.0 / pairs.len() as f64))
}

/// Plain evaluation of the residual loss over a sequence of states with
/// spacing `dt`.
pub fn physics_loss_values(states: &[Array2<f64>], u_0: &Array2<f64>, a: &Array2<f64>, p: &PhysicsParams, dt: f64) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::Config("physics loss needs two consecutive states".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("physics loss needs dt > 0, got {dt}")));
    }
    let mut total = 0.0;
    for w in states.windows(2) {
        check_same("physics_loss", &w[0], &w[1])?;
        let rhs = rhs_dense(&w[0], u_0, a, p)?;
        let res = (&w[1] - &w[0]) / dt - rhs;
        total += res.mapv(|v| v * v).mean().unwrap_or(0.0);
    }
    Ok(total / (states.len() - 1) as f64)
}
