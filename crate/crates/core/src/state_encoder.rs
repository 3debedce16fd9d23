//! Node-state predictor: a two-layer GCN per snapshot, sinusoidal positional
//! embeddings, a post-norm transformer encoder attending along time for each
//! node, and an affine readout. An RK4 rollout of a learned field over the
//! embeddings handles irregular snapshot spacing.

use netresil_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OdeSolver {
    None,
    Rk4 { dt: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEncoderConfig {
    pub d_e: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub gcn_hidden: usize,
    pub ffn_hidden: usize,
    pub ode_solver: OdeSolver,
}

impl Default for StateEncoderConfig {
    fn default() -> Self {
        Self {
            d_e: 16,
            n_heads: 2,
            n_layers: 1,
            gcn_hidden: 16,
            ffn_hidden: 32,
            ode_solver: OdeSolver::Rk4 { dt: 0.25 },
        }
    }
}

impl StateEncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_e / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_e, self.n_heads, self.n_layers, self.gcn_hidden, self.ffn_hidden];
        if dims.contains(&0) {
            return Err(Error::Config("state encoder dimensions must be >= 1".into()));
        }
        if self.d_e % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_e = {} is not divisible by n_heads = {}",
                self.d_e, self.n_heads
            )));
        }
        if let OdeSolver::Rk4 { dt } = self.ode_solver {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("ode dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }
}

pub fn init(cfg: &StateEncoderConfig, m: usize, p: &mut ModelParams, rng: &mut impl Rng) {
    let d = cfg.d_e;
    p.xavier("state.gcn.w1", m, cfg.gcn_hidden, rng);
    p.xavier("state.gcn.w2", cfg.gcn_hidden, d, rng);
    for l in 0..cfg.n_layers {
        let pre = format!("state.tf{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            p.xavier(&format!("{pre}.{w}"), d, d, rng);
        }
        p.ones(&format!("{pre}.ln1.gain"), &[d]);
        p.zeros(&format!("{pre}.ln1.bias"), &[d]);
        p.xavier(&format!("{pre}.ff.w1"), d, cfg.ffn_hidden, rng);
        p.zeros(&format!("{pre}.ff.b1"), &[cfg.ffn_hidden]);
        p.xavier(&format!("{pre}.ff.w2"), cfg.ffn_hidden, d, rng);
        p.zeros(&format!("{pre}.ff.b2"), &[d]);
        p.ones(&format!("{pre}.ln2.gain"), &[d]);
        p.zeros(&format!("{pre}.ln2.bias"), &[d]);
    }
    p.xavier("state.readout.w", d, m, rng);
    p.zeros("state.readout.b", &[m]);
    if let OdeSolver::Rk4 { .. } = cfg.ode_solver {
        p.xavier("state.ode.w", d, d, rng);
        p.zeros("state.ode.b", &[d]);
    }
}

/// `S relu(S U W1) W2` with `S` the self-loop normalized adjacency.
pub fn gcn_embed(tape: &mut Tape, s_norm: Var, u: Var, w1: Var, w2: Var) -> Result<Var> {
    let su = tape.matmul(s_norm, u)?;
    let h = tape.matmul(su, w1)?;
    let h = tape.relu(h);
    let sh = tape.matmul(s_norm, h)?;
    Ok(tape.matmul(sh, w2)?)
}

/// `PE(t, 2n) = sin(t / 10000^(2n/d))`, `PE(t, 2n+1) = cos(...)`.
pub fn positional_embedding(t: usize, d_e: usize) -> Vec<f64> {
    (0..d_e)
        .map(|k| {
            let angle = t as f64 / 10000f64.powf((k - k % 2) as f64 / d_e as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Output of one encoder layer along with the per-head attention weights
/// (`[N, T, T]` each).
pub struct LayerOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// One post-norm encoder layer over `x: [N, T, d_e]`, attention along `T`.
pub fn encoder_layer(tape: &mut Tape, bp: &BoundParams, layer: usize, cfg: &StateEncoderConfig, x: Var) -> Result<LayerOutput> {
    let shape = tape.shape(x).to_vec();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let dk = cfg.d_k();
    let pre = format!("state.tf{layer}");
    let w = |name: &str| bp.var(&format!("{pre}.{name}"));

    let x2 = tape.reshape(x, &[n * t, d])?;
    let q = tape.matmul(x2, w("wq")?)?;
    let k = tape.matmul(x2, w("wk")?)?;
    let v = tape.matmul(x2, w("wv")?)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut attention = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let mut split = |m: Var| -> Result<Var> {
            let s = tape.slice_last(m, h * dk, dk)?;
            Ok(tape.reshape(s, &[n, t, dk])?)
        };
        let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
        let kt = tape.transpose(kh)?;
        let scores = tape.batch_matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax(scores)?;
        heads.push(tape.batch_matmul(attn, vh)?);
        attention.push(attn);
    }
    let cat = tape.concat(&heads)?;
    let cat = tape.reshape(cat, &[n * t, d])?;
    let proj = tape.matmul(cat, w("wo")?)?;
    let res = tape.add(proj, x2)?;
    let y = tape.layer_norm(res, w("ln1.gain")?, w("ln1.bias")?, 0.0)?;

    let f = tape.matmul(y, w("ff.w1")?)?;
    let f = tape.add_bias(f, w("ff.b1")?)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w("ff.w2")?)?;
    let f = tape.add_bias(f, w("ff.b2")?)?;
    let res = tape.add(f, y)?;
    let out = tape.layer_norm(res, w("ln2.gain")?, w("ln2.bias")?, 0.0)?;
    Ok(LayerOutput {
        out: tape.reshape(out, &[n, t, d])?,
        attention,
    })
}

pub fn transformer_encode(tape: &mut Tape, bp: &BoundParams, cfg: &StateEncoderConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for l in 0..cfg.n_layers {
        h = encoder_layer(tape, bp, l, cfg, h)?.out;
    }
    Ok(h)
}

/// Embeds every window snapshot and stacks them to `[N, T, d_e]`.
/// `steps` holds `(normalized adjacency, states)` per snapshot.
pub fn embed_window(tape: &mut Tape, bp: &BoundParams, cfg: &StateEncoderConfig, steps: &[(Var, Var)]) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::Config("state encoder needs a window of at least one snapshot".into()));
    }
    let (w1, w2) = (bp.var("state.gcn.w1")?, bp.var("state.gcn.w2")?);
    let mut rows = Vec::with_capacity(steps.len());
    for (t, &(s_norm, u)) in steps.iter().enumerate() {
        let e = gcn_embed(tape, s_norm, u, w1, w2)?;
        let pe = tape.constant(Tensor::vector(positional_embedding(t, cfg.d_e))?);
        rows.push(tape.add_bias(e, pe)?);
    }
    let n = tape.shape(rows[0])[0];
    let cat = tape.concat(&rows)?;
    Ok(tape.reshape(cat, &[n, steps.len(), cfg.d_e])?)
}

/// Affine map `d_e -> M` applied to `[rows, d_e]`.
pub fn readout(tape: &mut Tape, bp: &BoundParams, e: Var) -> Result<Var> {
    let y = tape.matmul(e, bp.var("state.readout.w")?)?;
    Ok(tape.add_bias(y, bp.var("state.readout.b")?)?)
}

/// Contextual embedding of window position `t` from `[N, T, d_e]`.
pub fn position(tape: &mut Tape, ctx: Var, t: usize) -> Result<Var> {
    let s = tape.shape(ctx).to_vec();
    let flat = tape.reshape(ctx, &[s[0], s[1] * s[2]])?;
    Ok(tape.slice_last(flat, t * s[2], s[2])?)
}

/// RK4 rollout of `de/dt = field(e)` from `e0` to `t_target` in steps no
/// longer than `h`.
pub fn ode_rollout_with(
    tape: &mut Tape,
    mut field: impl FnMut(&mut Tape, Var) -> Result<Var>,
    e0: Var,
    t_target: f64,
    h: f64,
) -> Result<Var> {
    if !(t_target >= 0.0) || !(h > 0.0) {
        return Err(Error::Config(format!(
            "rollout needs t_target >= 0 and h > 0 (got {t_target}, {h})"
        )));
    }
    if t_target == 0.0 {
        return Ok(e0);
    }
    let steps = (t_target / h).ceil().max(1.0) as usize;
    let dt = t_target / steps as f64;
    let mut e = e0;
    for step in 0..steps {
        let k1 = field(tape, e)?;
        let a = tape.mul_scalar(k1, dt / 2.0);
        let e2 = tape.add(e, a)?;
        let k2 = field(tape, e2)?;
        let a = tape.mul_scalar(k2, dt / 2.0);
        let e3 = tape.add(e, a)?;
        let k3 = field(tape, e3)?;
        let a = tape.mul_scalar(k3, dt);
        let e4 = tape.add(e, a)?;
        let k4 = field(tape, e4)?;
        let k23 = tape.add(k2, k3)?;
        let k23 = tape.mul_scalar(k23, 2.0);
        let s = tape.add(k1, k23)?;
        let s = tape.add(s, k4)?;
        let s = tape.mul_scalar(s, dt / 6.0);
        e = tape.add(e, s)?;
        if !tape.value(e).is_finite() {
            let bad = tape.value(e).data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::Divergence {
                time: (step + 1) as f64 * dt,
                node: bad / tape.value(e).last_dim(),
            });
        }
    }
    Ok(e)
}

/// Rollout of the learned field `tanh(e W + b)`.
pub fn ode_rollout(tape: &mut Tape, bp: &BoundParams, e0: Var, t_target: f64, h: f64) -> Result<Var> {
    let (w, b) = (bp.var("state.ode.w")?, bp.var("state.ode.b")?);
    ode_rollout_with(
        tape,
        |tape, e| {
            let y = tape.matmul(e, w)?;
            let y = tape.add_bias(y, b)?;
            Ok(tape.tanh(y))
        },
        e0,
        t_target,
        h,
    )
}

/// One next-state prediction per window position: position `t` predicts
/// the snapshot after it. `gaps[t]` is the time to that next snapshot and
/// is only used by the rollout head.
pub fn predict_positions(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &StateEncoderConfig,
    steps: &[(Var, Var)],
    gaps: Option<&[f64]>,
) -> Result<Vec<Var>> {
    let x = embed_window(tape, bp, cfg, steps)?;
    let ctx = transformer_encode(tape, bp, cfg, x)?;
    let (n, t_len) = (tape.shape(ctx)[0], steps.len());
    let m = tape.shape(bp.var("state.readout.b")?)[0];
    match (gaps, cfg.ode_solver) {
        (Some(gaps), OdeSolver::Rk4 { dt }) => {
            let mut out = Vec::with_capacity(t_len);
            for (t, &gap) in gaps.iter().enumerate().take(t_len) {
                let e = position(tape, ctx, t)?;
                let e = ode_rollout(tape, bp, e, gap, dt)?;
                out.push(readout(tape, bp, e)?);
            }
            Ok(out)
        }
        _ => {
            let flat = tape.reshape(ctx, &[n * t_len, cfg.d_e])?;
            let y = readout(tape, bp, flat)?;
            let y = tape.reshape(y, &[n, t_len * m])?;
            (0..t_len).map(|t| Ok(tape.slice_last(y, t * m, m)?)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_embedding_values() {
        let pe0 = positional_embedding(0, 8);
        for (k, v) in pe0.iter().enumerate() {
            assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
        }
        let pe1 = positional_embedding(1, 8);
        assert!((pe1[0] - 0.84147).abs() < 1e-5);
        assert!((pe1[2] - (1.0f64 / 10000f64.powf(0.25)).sin()).abs() < 1e-15);
        assert!(positional_embedding(37, 16).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(StateEncoderConfig::default().validate().is_ok());
        let bad = StateEncoderConfig {
            d_e: 10,
            n_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
