mod common;

use std::collections::HashSet;

use common::{gradient_error, random_window, small_config};
use netresil_autodiff::{Tape, Var};
use netresil_core::model::{self, init_params};
use netresil_core::params::{to_tensor, BoundParams};
use netresil_core::trainer::{sample_negatives, topology_loss, window_objective, AdjacencySource, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const TOL: f64 = 1e-3;

/// Mean absolute error; the sign of the residual is held as a constant,
/// which is the exact derivative away from zero residuals.
fn mae(tape: &mut Tape, pred: Var, truth: &ndarray::Array2<f64>) -> Var {
    let t = tape.constant(to_tensor(truth));
    let diff = tape.sub(pred, t).unwrap();
    let sign = tape.value(diff).map(f64::signum);
    let sign = tape.constant(sign);
    let abs = tape.mul(diff, sign).unwrap();
    tape.mean(abs)
}

fn edge_pairs(g: &netresil_core::graph::Graph) -> Vec<(usize, usize)> {
    g.edges().iter().map(|&(i, j, _)| (i, j)).collect()
}

#[test]
fn state_encoder_mae_gradients() {
    for ode in [false, true] {
        for trial in 0..TRIALS {
            let cfg = small_config(ode);
            let (w, truth, _) = random_window(4, 3, 2, 100 + trial, ode);
            let params = init_params(&cfg, 2, trial);
            let build = |tape: &mut Tape, bp: &BoundParams| {
                let f = model::forward(tape, bp, &cfg, &w).unwrap();
                mae(tape, f.next_state, &truth)
            };
            let (err, name) = gradient_error(&params, "state.", 1e-6, &build);
            assert!(err < TOL, "ode {ode}, trial {trial}: {name} relative error {err:e}");
        }
    }
}

#[test]
fn topology_loss_gradients() {
    for trial in 0..TRIALS {
        let cfg = small_config(false);
        let (w, _, target) = random_window(4, 3, 2, 200 + trial, false);
        let mut pos = edge_pairs(&target);
        if pos.is_empty() {
            pos.push((0, 1));
        }
        let exclude: HashSet<_> = pos.iter().copied().collect();
        let neg = sample_negatives(4, &exclude, pos.len(), &mut ChaCha8Rng::seed_from_u64(trial));
        let params = init_params(&cfg, 2, trial);
        let build = |tape: &mut Tape, bp: &BoundParams| {
            let f = model::forward(tape, bp, &cfg, &w).unwrap();
            topology_loss(tape, f.adjacency, &pos, &neg).unwrap()
        };
        let (err, name) = gradient_error(&params, "topo.", 1e-4, &build);
        assert!(err < TOL, "trial {trial}: {name} relative error {err:e}");
    }
}

#[test]
fn joint_loss_gradients_on_five_nodes() {
    for source in [AdjacencySource::Predicted, AdjacencySource::Observed] {
        for trial in 0..TRIALS {
            let (err, name) = common::joint_loss_error(5, trial, source);
            assert!(err < TOL, "{source:?}, trial {trial}: {name} relative error {err:e}");
        }
    }
}

#[test]
fn joint_loss_reaches_both_encoders() {
    let cfg = TrainConfig {
        model: small_config(false),
        ..Default::default()
    };
    let (w, _, target) = random_window(5, 3, 2, 7, false);
    let pos = edge_pairs(&target);
    let exclude: HashSet<_> = pos.iter().copied().collect();
    let neg = sample_negatives(5, &exclude, pos.len(), &mut ChaCha8Rng::seed_from_u64(1));
    let params = init_params(&cfg.model, 2, 3);
    let grads = common::analytic_grads(&params, &|tape, bp| window_objective(tape, bp, &cfg, &w, &pos, &neg).unwrap().joint);
    for (name, g) in &grads {
        assert!(g.iter().any(|v| *v != 0.0), "{name} receives no gradient");
    }
}

