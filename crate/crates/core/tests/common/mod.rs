#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use netresil_autodiff::{Tape, Var};
use netresil_core::graph::Graph;
use netresil_core::model::{ModelConfig, WindowData};
use netresil_core::params::{BoundParams, ModelParams};
use netresil_core::state_encoder::{OdeSolver, StateEncoderConfig};
use netresil_core::topo_encoder::TopoEncoderConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(ode: bool) -> ModelConfig {
    ModelConfig {
        state: StateEncoderConfig {
            d_e: 4,
            n_heads: 2,
            n_layers: 1,
            gcn_hidden: 3,
            ffn_hidden: 5,
            ode_solver: if ode { OdeSolver::Rk4 { dt: 0.3 } } else { OdeSolver::None },
        },
        topo: TopoEncoderConfig {
            d_z: 3,
            l_hops: 2,
            d_h: 3,
            mlp_hidden: 4,
            negative_ratio: 1.0,
        },
    }
}

pub fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j, rng.gen_range(0.5..1.5)));
            }
        }
    }
    Graph::from_edges(n, &edges).unwrap()
}

/// Window of `t` random snapshots on `n` nodes with `m` features, plus the
/// states and graph of the following snapshot.
pub fn random_window(n: usize, t: usize, m: usize, seed: u64, irregular: bool) -> (WindowData, Array2<f64>, Graph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<Graph> = (0..=t).map(|_| random_graph(n, 0.5, &mut rng)).collect();
    let states: Vec<Array2<f64>> = (0..=t)
        .map(|_| Array2::from_shape_fn((n, m), |_| rng.gen_range(0.0..2.0)))
        .collect();
    let mut times = vec![0.0];
    for _ in 0..t {
        let gap = if irregular { rng.gen_range(0.3..1.2) } else { 0.5 };
        times.push(times.last().unwrap() + gap);
    }
    let w = WindowData {
        states: states[..t].to_vec(),
        adjacency: graphs[..t].iter().map(|g| g.symmetric_adjacency()).collect(),
        norm_adjacency: graphs[..t].iter().map(|g| g.laplacian().sym_norm_adjacency).collect(),
        times: times[..t].to_vec(),
        target_time: times[t],
        symmetric: true,
    };
    (w, states[t].clone(), graphs[t].clone())
}

pub fn analytic_grads(params: &ModelParams, build: &dyn Fn(&mut Tape, &BoundParams) -> Var) -> BTreeMap<String, Vec<f64>> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let loss = build(&mut tape, &bp);
    let sizes: Vec<usize> = bp.iter().map(|(_, v)| tape.value(v).numel()).collect();
    let grads = tape.backward(loss).unwrap();
    bp.iter()
        .zip(sizes)
        .map(|((name, v), n)| {
            let g = grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
            (name.to_string(), g)
        })
        .collect()
}

pub fn loss_value(params: &ModelParams, build: &dyn Fn(&mut Tape, &BoundParams) -> Var) -> f64 {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let loss = build(&mut tape, &bp);
    tape.value(loss).item()
}

/// Worst norm-wise relative error between autodiff and central differences
/// over the parameter tensors whose names start with `prefix`. Returns the
/// error and the name of the worst tensor.
pub fn gradient_error(params: &ModelParams, prefix: &str, h: f64, build: &dyn Fn(&mut Tape, &BoundParams) -> Var) -> (f64, String) {
    let analytic = analytic_grads(params, build);
    let mut worst = (0.0, String::new());
    for (name, g) in analytic.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let mut numeric = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            numeric.push((loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * h));
        }
        let diff: f64 = g.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|b| b * b).sum::<f64>().sqrt())
            .max(1e-7);
        let err = diff / scale;
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}

/// Gradient error of the full joint loss on a random `n`-node, three-snapshot
/// window; odd trials use irregular timestamps so the rollout head is active.
pub fn joint_loss_error(n: usize, trial: u64, source: netresil_core::trainer::AdjacencySource) -> (f64, String) {
    use netresil_core::trainer::{sample_negatives, window_objective, TrainConfig};
    let irregular = trial % 2 == 1;
    let cfg = TrainConfig {
        model: small_config(irregular),
        physics_adjacency: source,
        ..Default::default()
    };
    let (w, _, target) = random_window(n, 3, 2, 300 + trial, irregular);
    let mut pos: Vec<(usize, usize)> = target.edges().iter().map(|&(i, j, _)| (i, j)).collect();
    if pos.is_empty() {
        pos.push((0, 1));
    }
    let exclude: std::collections::HashSet<_> = pos.iter().copied().collect();
    let neg = sample_negatives(n, &exclude, pos.len(), &mut ChaCha8Rng::seed_from_u64(trial));
    let params = netresil_core::model::init_params(&cfg.model, 2, trial);
    let build = |tape: &mut Tape, bp: &BoundParams| window_objective(tape, bp, &cfg, &w, &pos, &neg).unwrap().joint;
    gradient_error(&params, "", 1e-4, &build)
}
