mod common;

use common::{random_window, small_config};
use ndarray::Array2;
use netresil_autodiff::{Tape, Tensor, Var};
use netresil_core::model::{self, init_params, WindowData};
use netresil_core::params::{to_tensor, ModelParams};
use netresil_core::state_encoder::{
    encoder_layer, gcn_embed, ode_rollout_with, positional_embedding, readout, StateEncoderConfig,
};
use netresil_core::topo_encoder::{decode_edges, fuse, spatial_layer, temporal_aggregate, SnapshotStructure};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn zero_prefix(p: &mut ModelParams, prefix: &str) {
    let names: Vec<String> = p.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        p.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---- state encoder ----

#[test]
fn gcn_with_zero_weights_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let s = tape.constant(random_tensor(&mut rng, &[4, 4], 0.0, 1.0));
    let u = tape.constant(random_tensor(&mut rng, &[4, 2], 0.0, 1.0));
    let w1 = tape.constant(Tensor::zeros(&[2, 3]));
    let w2 = tape.constant(Tensor::zeros(&[3, 5]));
    let e = gcn_embed(&mut tape, s, u, w1, w2).unwrap();
    assert_eq!(tape.value(e).shape(), &[4, 5]);
    assert!(tape.value(e).data().iter().all(|&x| x == 0.0));
}

#[test]
fn gcn_on_single_node_with_identity_weights_returns_state() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
    let u = tape.constant(Tensor::matrix(1, 3, vec![0.2, 1.5, 3.0]).unwrap());
    let (w1, w2) = (tape.constant(Tensor::eye(3)), tape.constant(Tensor::eye(3)));
    let e = gcn_embed(&mut tape, s, u, w1, w2).unwrap();
    assert_eq!(tape.value(e).data(), &[0.2, 1.5, 3.0]);
}

#[test]
fn positional_embedding_examples() {
    assert_eq!(positional_embedding(0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let pe = positional_embedding(1, 4);
    let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in pe.iter().zip(want) {
        assert!(close(*a, b, 1e-15));
    }
    let pe = positional_embedding(3, 5);
    assert_eq!(pe.len(), 5);
    assert!(close(pe[4], (3.0 / 10000f64.powf(0.8)).sin(), 1e-15));
}

fn state_cfg() -> StateEncoderConfig {
    small_config(false).state
}

/// Runs one encoder layer on `x` and returns (output, per-head attention).
fn run_layer(params: &ModelParams, x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = encoder_layer(&mut tape, &bp, 0, &state_cfg(), xv).unwrap();
    let att = out.attention.iter().map(|&a| tape.value(a).clone()).collect();
    (tape.value(out.out).clone(), att)
}

#[test]
fn single_step_attention_is_one() {
    let params = init_params(&small_config(false), 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, att) = run_layer(&params, &random_tensor(&mut rng, &[3, 1, 4], -1.0, 1.0));
    for a in att {
        assert_eq!(a.shape(), &[3, 1, 1]);
        assert!(a.data().iter().all(|&w| close(w, 1.0, 1e-15)));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let params = init_params(&small_config(false), 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, att) = run_layer(&params, &random_tensor(&mut rng, &[3, 5, 4], -2.0, 2.0));
    for a in att {
        for row in a.data().chunks(5) {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn zero_query_weights_give_uniform_attention() {
    let mut params = init_params(&small_config(false), 2, 6);
    zero_prefix(&mut params, "state.tf0.wq");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, att) = run_layer(&params, &random_tensor(&mut rng, &[2, 4, 4], -2.0, 2.0));
    for a in att {
        assert!(a.data().iter().all(|&w| close(w, 0.25, 1e-15)));
    }
}

#[test]
fn encoder_output_is_finite_for_bounded_inputs() {
    let params = init_params(&small_config(false), 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (out, _) = run_layer(&params, &random_tensor(&mut rng, &[3, 4, 4], -10.0, 10.0));
        assert!(out.is_finite());
        assert_eq!(out.shape(), &[3, 4, 4]);
    }
}

#[test]
fn zero_readout_gives_zero_prediction() {
    let mut params = init_params(&small_config(false), 3, 8);
    zero_prefix(&mut params, "state.readout");
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e = tape.constant(random_tensor(&mut rng, &[5, 4], -1.0, 1.0));
    let y = readout(&mut tape, &bp, e).unwrap();
    assert_eq!(tape.value(y).shape(), &[5, 3]);
    assert!(tape.value(y).data().iter().all(|&x| x == 0.0));

    let (w, _, _) = random_window(5, 3, 3, 9, false);
    let (states, adjacency) = model::predict(&params, &small_config(false), &w).unwrap();
    assert_eq!(states.dim(), (5, 3));
    assert_eq!(adjacency.dim(), (5, 5));
    assert!(states.iter().all(|&x| x == 0.0));
}

fn rollout(e0: &Tensor, t: f64, field: impl FnMut(&mut Tape, Var) -> netresil_core::Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let e = tape.constant(e0.clone());
    let out = ode_rollout_with(&mut tape, field, e, t, 0.1).unwrap();
    tape.value(out).clone()
}

#[test]
fn ode_rollout_examples() {
    let e0 = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let const_field = |c: f64| {
        move |tape: &mut Tape, e: Var| -> netresil_core::Result<Var> {
            let shape = tape.shape(e).to_vec();
            Ok(tape.constant(Tensor::full(&shape, c)))
        }
    };
    assert_eq!(rollout(&e0, 0.0, const_field(3.0)), e0);
    assert_eq!(rollout(&e0, 1.7, const_field(0.0)), e0);
    let moved = rollout(&e0, 1.7, const_field(0.5));
    for (a, b) in moved.data().iter().zip(e0.data()) {
        assert!(close(*a, b + 0.85, 1e-12));
    }
    let mut tape = Tape::new();
    let e = tape.constant(e0.clone());
    assert!(ode_rollout_with(&mut tape, const_field(1.0), e, -1.0, 0.1).is_err());
}

// ---- topology encoder ----

/// Params whose first spatial layer has input width 2.
fn topo_params(seed: u64) -> ModelParams {
    init_params(&small_config(false), 2, seed)
}

fn attention_of(params: &ModelParams, x: &Tensor, adjacency: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (st, mask) = SnapshotStructure::new(&mut tape, adjacency).unwrap();
    let (z, attn) = spatial_layer(&mut tape, &bp, 0, xv, &st, &mask).unwrap();
    (tape.value(z).clone(), tape.value(attn).clone())
}

#[test]
fn single_neighbor_gets_all_attention() {
    let a = Tensor::matrix(3, 3, vec![0.0, 0.7, 0.0, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let x = Tensor::matrix(3, 2, vec![0.1, 0.9, 1.2, 0.3, 0.5, 0.5]).unwrap();
    let (_, att) = attention_of(&topo_params(1), &x, &a);
    assert!(close(att.at2(0, 1), 1.0, 1e-15));
    assert!(close(att.at2(1, 0), 1.0, 1e-15));
    assert!((0..3).all(|j| att.at2(2, j) == 0.0));
}

#[test]
fn identical_neighbors_share_attention() {
    // Star centred on node 0 with two leaves carrying the same state.
    let a = Tensor::matrix(3, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let x = Tensor::matrix(3, 2, vec![0.3, 0.8, 1.1, 0.4, 1.1, 0.4]).unwrap();
    let (_, att) = attention_of(&topo_params(2), &x, &a);
    assert!(close(att.at2(0, 1), 0.5, 1e-15));
    assert!(close(att.at2(0, 2), 0.5, 1e-15));
    assert_eq!(att.at2(0, 0), 0.0);
}

#[test]
fn spatial_outputs_lie_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..10 {
        let (w, _, _) = random_window(6, 1, 2, seed, false);
        let x = random_tensor(&mut rng, &[6, 2], -3.0, 3.0);
        let (z, att) = attention_of(&topo_params(seed), &x, &to_tensor(&w.adjacency[0]));
        assert!(z.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for (i, row) in att.data().chunks(6).enumerate() {
            let s: f64 = row.iter().sum();
            let has = w.adjacency[0].row(i).iter().any(|&v| v != 0.0);
            assert!(close(s, if has { 1.0 } else { 0.0 }, 1e-12));
        }
    }
}

fn lstm_hidden(params: &ModelParams, zs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let vs: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
    let hs = temporal_aggregate(&mut tape, &bp, &vs).unwrap();
    hs.iter().map(|&h| tape.value(h).clone()).collect()
}

#[test]
fn lstm_with_zero_weights_stays_at_zero() {
    let mut params = topo_params(3);
    zero_prefix(&mut params, "topo.lstm");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let zs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[3, 3], 0.0, 1.0)).collect();
    for h in lstm_hidden(&params, &zs) {
        assert!(h.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn lstm_hidden_states_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let zs: Vec<Tensor> = (0..6).map(|_| random_tensor(&mut rng, &[4, 3], -50.0, 50.0)).collect();
    let hs = lstm_hidden(&topo_params(4), &zs);
    assert_eq!(hs.len(), 6);
    assert!(hs.iter().flat_map(|h| h.data()).all(|v| v.abs() < 1.0));
}

fn fused(params: &ModelParams, members: &[Tensor]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let vs: Vec<Var> = members.iter().map(|m| tape.constant(m.clone())).collect();
    let (q, delta) = fuse(&mut tape, &bp, &vs).unwrap();
    (tape.value(q).clone(), tape.value(delta).clone())
}

#[test]
fn fusion_weights() {
    let params = topo_params(5);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);

    let (_, delta) = fused(&params, std::slice::from_ref(&m));
    assert!(delta.data().iter().all(|&d| close(d, 1.0, 1e-15)));

    let (_, delta) = fused(&params, &[m.clone(), m.clone(), m.clone()]);
    assert!(delta.data().iter().all(|&d| close(d, 1.0 / 3.0, 1e-15)));

    let others: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[4, 3], -1.0, 1.0)).collect();
    let (q, _) = fused(&params, &others);
    let reversed: Vec<Tensor> = others.iter().rev().cloned().collect();
    let (qr, _) = fused(&params, &reversed);
    for (a, b) in q.data().iter().zip(qr.data()) {
        assert!(close(*a, *b, 1e-14));
    }
}

fn decoded(params: &ModelParams, q: &Tensor, symmetric: bool) -> Tensor {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let qv = tape.constant(q.clone());
    let a = decode_edges(&mut tape, &bp, qv, symmetric).unwrap();
    tape.value(a).clone()
}

#[test]
fn decoder_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_tensor(&mut rng, &[5, 3], 0.0, 1.0);

    let mut zero = topo_params(6);
    zero_prefix(&mut zero, "topo.dec");
    let a = decoded(&zero, &q, true);
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(a.at2(i, j), if i == j { 0.0 } else { 0.5 });
        }
    }

    let params = topo_params(7);
    let a = decoded(&params, &q, true);
    for i in 0..5 {
        assert_eq!(a.at2(i, i), 0.0);
        for j in 0..5 {
            assert_eq!(a.at2(i, j), a.at2(j, i));
            assert!(a.at2(i, j) >= 0.0 && a.at2(i, j) <= 1.0);
        }
    }

    let same = Tensor::matrix(4, 3, [0.2, 0.6, 0.9].repeat(4)).unwrap();
    let a = decoded(&params, &same, false);
    let c = a.at2(0, 1);
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(close(a.at2(i, j), c, 1e-15));
            }
        }
    }
}

// ---- equivariance ----

fn permute_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(m.raw_dim(), |(i, c)| m[[perm[i], c]])
}

fn permute_both(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(m.raw_dim(), |(i, j)| m[[perm[i], perm[j]]])
}

fn permute_window(w: &WindowData, perm: &[usize]) -> WindowData {
    WindowData {
        states: w.states.iter().map(|s| permute_rows(s, perm)).collect(),
        adjacency: w.adjacency.iter().map(|a| permute_both(a, perm)).collect(),
        norm_adjacency: w.norm_adjacency.iter().map(|a| permute_both(a, perm)).collect(),
        times: w.times.clone(),
        target_time: w.target_time,
        symmetric: w.symmetric,
    }
}

fn perm_case() -> impl Strategy<Value = (u64, Vec<usize>)> {
    (2usize..8).prop_flat_map(|n| (any::<u64>(), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gcn_is_permutation_equivariant((seed, perm) in perm_case()) {
        let n = perm.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, _, _) = random_window(n, 1, 2, seed, false);
        let (w1, w2) = (random_tensor(&mut rng, &[2, 3], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0));
        let run = |s: &Array2<f64>, u: &Array2<f64>| {
            let mut tape = Tape::new();
            let (s, u) = (tape.constant(to_tensor(s)), tape.constant(to_tensor(u)));
            let (a, b) = (tape.constant(w1.clone()), tape.constant(w2.clone()));
            let e = gcn_embed(&mut tape, s, u, a, b).unwrap();
            tape.value(e).clone()
        };
        let e = run(&w.norm_adjacency[0], &w.states[0]);
        let ep = run(&permute_both(&w.norm_adjacency[0], &perm), &permute_rows(&w.states[0], &perm));
        for i in 0..n {
            for c in 0..4 {
                prop_assert!(close(ep.at2(i, c), e.at2(perm[i], c), 1e-12));
            }
        }
    }

    #[test]
    fn model_is_permutation_equivariant((seed, perm) in perm_case(), ode in any::<bool>()) {
        let n = perm.len();
        let cfg = small_config(ode);
        let params = init_params(&cfg, 2, seed);
        let (w, _, _) = random_window(n, 3, 2, seed, ode);
        let (s, a) = model::predict(&params, &cfg, &w).unwrap();
        let (sp, ap) = model::predict(&params, &cfg, &permute_window(&w, &perm)).unwrap();
        for i in 0..n {
            for c in 0..2 {
                prop_assert!(close(sp[[i, c]], s[[perm[i], c]], 1e-10));
            }
            for j in 0..n {
                prop_assert!(close(ap[[i, j]], a[[perm[i], perm[j]]], 1e-10));
            }
        }
    }
}
