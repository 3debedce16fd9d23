//! Topology predictor: neighbor-attention spatial aggregation per snapshot,
//! an LSTM over the spatial embeddings, attention fusion of all of them into
//! one vector per node, and a pairwise MLP edge decoder.

use netresil_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoEncoderConfig {
    pub d_z: usize,
    pub l_hops: usize,
    pub d_h: usize,
    pub mlp_hidden: usize,
    pub negative_ratio: f64,
}

impl Default for TopoEncoderConfig {
    fn default() -> Self {
        Self {
            d_z: 16,
            l_hops: 1,
            d_h: 16,
            mlp_hidden: 32,
            negative_ratio: 1.0,
        }
    }
}

impl TopoEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d_z, self.l_hops, self.d_h, self.mlp_hidden].contains(&0) {
            return Err(Error::Config("topology encoder dimensions must be >= 1".into()));
        }
        if self.d_z != self.d_h {
            return Err(Error::Config(format!(
                "d_z ({}) and d_h ({}) must match so spatial and temporal embeddings can be fused",
                self.d_z, self.d_h
            )));
        }
        if !(self.negative_ratio > 0.0) {
            return Err(Error::Config("negative_ratio must be positive".into()));
        }
        Ok(())
    }
}

pub fn init(cfg: &TopoEncoderConfig, m: usize, p: &mut ModelParams, rng: &mut impl Rng) {
    let dz = cfg.d_z;
    for l in 0..cfg.l_hops {
        let d_in = if l == 0 { m } else { dz };
        let pre = format!("topo.hop{l}");
        p.xavier(&format!("{pre}.att_i"), d_in, dz, rng);
        p.xavier(&format!("{pre}.att_j"), d_in, dz, rng);
        p.xavier(&format!("{pre}.att_e"), 1, dz, rng);
        p.zeros(&format!("{pre}.att_b"), &[dz]);
        p.xavier(&format!("{pre}.att_v"), dz, 1, rng);
        p.xavier(&format!("{pre}.msg_w"), d_in + 1, dz, rng);
        p.zeros(&format!("{pre}.msg_b"), &[dz]);
        p.xavier(&format!("{pre}.out_w"), d_in + dz, dz, rng);
        p.zeros(&format!("{pre}.out_b"), &[dz]);
    }
    let dh = cfg.d_h;
    p.xavier("topo.lstm.wx", dz, 4 * dh, rng);
    p.xavier("topo.lstm.wh", dh, 4 * dh, rng);
    p.zeros("topo.lstm.b", &[4 * dh]);
    p.xavier("topo.fuse.score", dh, 1, rng);
    p.xavier("topo.fuse.proj", dh, dh, rng);
    p.xavier("topo.dec.w_i", dh, cfg.mlp_hidden, rng);
    p.xavier("topo.dec.w_j", dh, cfg.mlp_hidden, rng);
    p.zeros("topo.dec.b1", &[cfg.mlp_hidden]);
    p.xavier("topo.dec.w2", cfg.mlp_hidden, 1, rng);
    p.zeros("topo.dec.b2", &[1]);
}

/// Constant tensors describing one input snapshot's structure.
#[derive(Clone, Copy, Debug)]
pub struct SnapshotStructure {
    /// `[N, N]` edge weights.
    pub adjacency: Var,
    /// `[N * N, 1]` edge weights as a feature column.
    pub edge_feature: Var,
    /// `[N]` with 1 for nodes that have a neighbor, 0 otherwise.
    pub has_neighbor: Var,
}

impl SnapshotStructure {
    pub fn new(tape: &mut Tape, adjacency: &Tensor) -> Result<(Self, Vec<bool>)> {
        let n = adjacency.rows();
        let mask: Vec<bool> = adjacency.data().iter().map(|&w| w != 0.0).collect();
        let has: Vec<f64> = mask
            .chunks(n)
            .map(|r| if r.iter().any(|&b| b) { 1.0 } else { 0.0 })
            .collect();
        let s = Self {
            adjacency: tape.constant(adjacency.clone()),
            edge_feature: tape.constant(adjacency.reshaped(&[n * n, 1])?),
            has_neighbor: tape.constant(Tensor::vector(has)?),
        };
        Ok((s, mask))
    }
}

/// One spatial layer. Returns `(z, attention)`; attention rows are
/// normalized over neighbors and all-zero for isolated nodes.
pub fn spatial_layer(
    tape: &mut Tape,
    bp: &BoundParams,
    hop: usize,
    x: Var,
    st: &SnapshotStructure,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let pre = format!("topo.hop{hop}");
    let w = |name: &str| bp.var(&format!("{pre}.{name}"));
    let n = tape.shape(x)[0];
    let dz = tape.shape(w("att_b")?)[0];

    let pi = tape.matmul(x, w("att_i")?)?;
    let pj = tape.matmul(x, w("att_j")?)?;
    let pair = tape.pair_sum(pi, pj)?;
    let pair = tape.reshape(pair, &[n * n, dz])?;
    let pe = tape.matmul(st.edge_feature, w("att_e")?)?;
    let pre_act = tape.add(pair, pe)?;
    let pre_act = tape.add_bias(pre_act, w("att_b")?)?;
    let hidden = tape.sigmoid(pre_act);
    let score = tape.matmul(hidden, w("att_v")?)?;
    let score = tape.reshape(score, &[n, n])?;
    let attn = tape.masked_softmax(score, mask)?;

    let msg_u = tape.matmul(attn, x)?;
    let weighted = tape.mul(attn, st.adjacency)?;
    let msg_e = tape.sum_last(weighted);
    let msg_e = tape.reshape(msg_e, &[n, 1])?;
    let msg = tape.concat(&[msg_u, msg_e])?;
    let zp = tape.matmul(msg, w("msg_w")?)?;
    let zp = tape.add_bias(zp, w("msg_b")?)?;
    let zp = tape.sigmoid(zp);
    let zp = tape.scale_rows(zp, st.has_neighbor)?;

    let both = tape.concat(&[x, zp])?;
    let z = tape.matmul(both, w("out_w")?)?;
    let z = tape.add_bias(z, w("out_b")?)?;
    Ok((tape.sigmoid(z), attn))
}

/// Stacks `l_hops` spatial layers on the states of one snapshot.
pub fn spatial_aggregate(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &TopoEncoderConfig,
    u: Var,
    st: &SnapshotStructure,
    mask: &[bool],
) -> Result<Var> {
    let mut x = u;
    for hop in 0..cfg.l_hops {
        x = spatial_layer(tape, bp, hop, x, st, mask)?.0;
    }
    Ok(x)
}

/// LSTM hidden state after each element of `zs` (gate order i, f, g, o).
pub fn temporal_aggregate(tape: &mut Tape, bp: &BoundParams, zs: &[Var]) -> Result<Vec<Var>> {
    let first = *zs.first().ok_or_else(|| Error::Config("temporal aggregation needs a non-empty sequence".into()))?;
    let n = tape.shape(first)[0];
    let (wx, wh, b) = (bp.var("topo.lstm.wx")?, bp.var("topo.lstm.wh")?, bp.var("topo.lstm.b")?);
    let dh = tape.shape(wh)[0];
    let mut h = tape.constant(Tensor::zeros(&[n, dh]));
    let mut c = h;
    let mut out = Vec::with_capacity(zs.len());
    for &z in zs {
        let gx = tape.matmul(z, wx)?;
        let gh = tape.matmul(h, wh)?;
        let g = tape.add(gx, gh)?;
        let g = tape.add_bias(g, b)?;
        let i = tape.slice_last(g, 0, dh)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_last(g, dh, dh)?;
        let f = tape.sigmoid(f);
        let cand = tape.slice_last(g, 2 * dh, dh)?;
        let cand = tape.tanh(cand);
        let o = tape.slice_last(g, 3 * dh, dh)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}

/// Attention-weighted sum over `members` (each `[N, d]`) followed by a
/// sigmoid projection. Returns `(q, weights [N, |E|])`.
pub fn fuse(tape: &mut Tape, bp: &BoundParams, members: &[Var]) -> Result<(Var, Var)> {
    let first = *members.first().ok_or_else(|| Error::Config("fusion needs at least one embedding".into()))?;
    let (n, d) = (tape.shape(first)[0], tape.shape(first)[1]);
    let (score_w, proj) = (bp.var("topo.fuse.score")?, bp.var("topo.fuse.proj")?);
    let mut scores = Vec::with_capacity(members.len());
    for &e in members {
        let s = tape.sigmoid(e);
        scores.push(tape.matmul(s, score_w)?);
    }
    let scores = tape.concat(&scores)?;
    let delta = tape.softmax(scores)?;
    let k = members.len();
    let stacked = tape.concat(members)?;
    let stacked = tape.reshape(stacked, &[n, k, d])?;
    let weights = tape.reshape(delta, &[n, 1, k])?;
    let pooled = tape.batch_matmul(weights, stacked)?;
    let pooled = tape.reshape(pooled, &[n, d])?;
    let q = tape.matmul(pooled, proj)?;
    Ok((tape.sigmoid(q), delta))
}

/// Edge probabilities from the pairwise MLP on `[q_i, q_j]`, symmetrized
/// when `symmetric`, with a zero diagonal.
pub fn decode_edges(tape: &mut Tape, bp: &BoundParams, q: Var, symmetric: bool) -> Result<Var> {
    let n = tape.shape(q)[0];
    let hidden = tape.shape(bp.var("topo.dec.b1")?)[0];
    let a = tape.matmul(q, bp.var("topo.dec.w_i")?)?;
    let b = tape.matmul(q, bp.var("topo.dec.w_j")?)?;
    let h = tape.pair_sum(a, b)?;
    let h = tape.reshape(h, &[n * n, hidden])?;
    let h = tape.add_bias(h, bp.var("topo.dec.b1")?)?;
    let h = tape.relu(h);
    let logit = tape.matmul(h, bp.var("topo.dec.w2")?)?;
    let logit = tape.add_bias(logit, bp.var("topo.dec.b2")?)?;
    let p = tape.sigmoid(logit);
    let mut p = tape.reshape(p, &[n, n])?;
    if symmetric {
        let pt = tape.transpose(p)?;
        let s = tape.add(p, pt)?;
        p = tape.mul_scalar(s, 0.5);
    }
    let off_diag = tape.constant(Tensor::new(
        vec![n, n],
        (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect(),
    )?);
    Ok(tape.mul(p, off_diag)?)
}

/// Full topology head over a window of `(states, structure, mask)` snapshots.
pub fn predict_adjacency(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &TopoEncoderConfig,
    window: &[(Var, SnapshotStructure, Vec<bool>)],
    symmetric: bool,
) -> Result<Var> {
    let zs = window
        .iter()
        .map(|(u, st, mask)| spatial_aggregate(tape, bp, cfg, *u, st, mask))
        .collect::<Result<Vec<_>>>()?;
    let hs = temporal_aggregate(tape, bp, &zs)?;
    let members: Vec<Var> = zs.iter().chain(&hs).copied().collect();
    let (q, _) = fuse(tape, bp, &members)?;
    decode_edges(tape, bp, q, symmetric)
}
