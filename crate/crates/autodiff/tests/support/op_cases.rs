#![allow(dead_code)]

use netresil_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TRIALS: usize = 20;

/// Builds `sum(op(inputs) * weights)` so every output entry contributes with a
/// distinct sensitivity.
fn weighted_loss(
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    weights_seed: u64,
    track: bool,
) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = build(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

fn eval(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], seed: u64) -> f64 {
    let (tape, _, loss) = weighted_loss(build, inputs, seed, false);
    tape.value(loss).item()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Largest relative error between autodiff and central differences over all
/// inputs.
pub fn check(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], seed: u64) -> f64 {
    let (tape, vars, loss) = weighted_loss(build, inputs, seed, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = Vec::with_capacity(input.numel());
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            numeric.push((eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero with random sign, for kinked or singular ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable operation with its input generator.
pub struct OpCase {
    pub group: &'static str,
    pub name: &'static str,
    gen: Gen,
    build: Build,
}

impl OpCase {
    /// Largest relative error over `TRIALS` random inputs.
    pub fn worst_error(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ self.name.len() as u64);
        (0..TRIALS)
            .map(|trial| check(&*self.build, &(self.gen)(&mut rng), trial as u64))
            .fold(0.0, f64::max)
    }
}

fn case(
    group: &'static str,
    name: &'static str,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> OpCase {
    OpCase {
        group,
        name,
        gen: Box::new(gen),
        build: Box::new(build),
    }
}

fn binary(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[3, 3], -2.0, 2.0), random(r, &[3, 3], -2.0, 2.0)]
}

fn unary(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[4, 3], -3.0, 3.0)]
}

fn kinked(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![away_from_zero(r, &[4, 3])]
}

fn positive(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[4, 3], 0.2, 3.0)]
}

fn rows(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[3, 5], -3.0, 3.0)]
}

fn pair3(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[2, 3, 2], -1.0, 1.0)]
}

/// Every differentiable tape operation, plus a composite attention block.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", "matmul", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        }),
        case(
            "matmul",
            "batch_matmul",
            |r| vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[2, 4, 3], -1.0, 1.0)],
            |t, v| t.batch_matmul(v[0], v[1]).unwrap(),
        ),
        case("binary", "add", binary, |t, v| t.add(v[0], v[1]).unwrap()),
        case("binary", "sub", binary, |t, v| t.sub(v[0], v[1]).unwrap()),
        case("binary", "mul", binary, |t, v| t.mul(v[0], v[1]).unwrap()),
        case(
            "broadcast",
            "add_bias",
            |r| vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)],
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
        ),
        case(
            "broadcast",
            "scale_rows",
            |r| vec![random(r, &[5, 3], -1.0, 1.0), random(r, &[5], -1.0, 1.0)],
            |t, v| t.scale_rows(v[0], v[1]).unwrap(),
        ),
        case(
            "broadcast",
            "pair_sum",
            |r| vec![random(r, &[3, 2], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
            |t, v| t.pair_sum(v[0], v[1]).unwrap(),
        ),
        case("unary", "mul_scalar", unary, |t, v| t.mul_scalar(v[0], -1.7)),
        case("unary", "add_scalar", unary, |t, v| t.add_scalar(v[0], 0.3)),
        case("unary", "sigmoid", unary, |t, v| t.sigmoid(v[0])),
        case("unary", "tanh", unary, |t, v| t.tanh(v[0])),
        case("unary", "exp", unary, |t, v| t.exp(v[0])),
        case("unary", "square", unary, |t, v| t.square(v[0])),
        case("unary", "relu", kinked, |t, v| t.relu(v[0])),
        case("unary", "recip", kinked, |t, v| t.recip(v[0])),
        case("unary", "clamp", kinked, |t, v| t.clamp(v[0], -0.05, 0.05)),
        case("unary", "ln", positive, |t, v| t.ln(v[0])),
        case("unary", "sqrt", positive, |t, v| t.sqrt(v[0])),
        case("normalization", "softmax", rows, |t, v| t.softmax(v[0]).unwrap()),
        case("normalization", "masked_softmax", rows, |t, v| {
            let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
            t.masked_softmax(v[0], &mask).unwrap()
        }),
        case(
            "normalization",
            "layer_norm",
            |r| vec![random(r, &[3, 5], -3.0, 3.0), random(r, &[5], 0.5, 1.5), random(r, &[5], -0.5, 0.5)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        ),
        case("structural", "concat", pair3, |t, v| t.concat(&[v[0], v[1], v[0]]).unwrap()),
        case("structural", "slice_last", pair3, |t, v| t.slice_last(v[0], 1, 2).unwrap()),
        case("structural", "reshape", pair3, |t, v| t.reshape(v[0], &[6, 4]).unwrap()),
        case("structural", "transpose", pair3, |t, v| t.transpose(v[0]).unwrap()),
        case("structural", "sum", pair3, |t, v| t.sum(v[0])),
        case("structural", "mean", pair3, |t, v| t.mean(v[0])),
        case("structural", "sum_last", pair3, |t, v| t.sum_last(v[0])),
        case("structural", "gather", pair3, |t, v| t.gather(v[0], &[0, 5, 5, 23, 7]).unwrap()),
        // softmax(Q K^T / sqrt(d)) V followed by layer norm, all inputs tracked.
        case(
            "composite",
            "attention",
            |r| {
                vec![
                    random(r, &[2, 3, 4], -1.0, 1.0),
                    random(r, &[4, 4], -1.0, 1.0),
                    random(r, &[4, 4], -1.0, 1.0),
                    random(r, &[4], 0.5, 1.5),
                    random(r, &[4], -0.2, 0.2),
                ]
            },
            |t, v| {
                let flat = t.reshape(v[0], &[6, 4]).unwrap();
                let q = t.matmul(flat, v[1]).unwrap();
                let q = t.reshape(q, &[2, 3, 4]).unwrap();
                let k = t.matmul(flat, v[2]).unwrap();
                let k = t.reshape(k, &[2, 3, 4]).unwrap();
                let kt = t.transpose(k).unwrap();
                let scores = t.batch_matmul(q, kt).unwrap();
                let scores = t.mul_scalar(scores, 0.5);
                let att = t.softmax(scores).unwrap();
                let out = t.batch_matmul(att, v[0]).unwrap();
                let res = t.add(out, v[0]).unwrap();
                t.layer_norm(res, v[3], v[4], 1e-5).unwrap()
            },
        ),
    ]
}
