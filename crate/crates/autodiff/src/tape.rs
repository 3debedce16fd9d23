use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Default LayerNorm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    PairSum(Var, Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape. Rebuilt for every forward pass and consumed by
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn mismatch<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return mismatch("matmul", &sa, &sb);
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![sa[0], sb[1]], data), Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return mismatch("batch_matmul", &sa, &sb);
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            data.extend(kernels::matmul(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], data),
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch(name, self.shape(a), self.shape(b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let n = *sx.last().unwrap();
        if sb.iter().product::<usize>() != n {
            return mismatch("add_bias", &sx, &sb);
        }
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(sx, data), Op::AddBias(x, bias), rg))
    }

    /// Multiplies row `r` of `x` (viewed as `[rows, last_dim]`) by `scale[r]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(scale);
        if sv.numel() != xv.rows() {
            return mismatch("scale_rows", xv.shape(), sv.shape());
        }
        let n = xv.last_dim();
        let data = xv
            .data()
            .chunks(n)
            .zip(sv.data())
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x, scale]);
        Ok(self.push(value, Op::ScaleRows(x, scale), rg))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            data.extend(kernels::softmax(row)?);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// non-zero. Rows with no admissible entry produce all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return mismatch("masked_softmax", xv.shape(), &[mask.len()]);
        }
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for (row, m) in xv.data().chunks(n).zip(mask.chunks(n)) {
            data.extend(kernels::masked_softmax(row, m));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    /// An `eps` of zero is replaced by [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d < 2 && eps <= 0.0 {
            return Err(AutodiffError::Invalid {
                op: "layer_norm",
                reason: "feature dimension 1 needs a positive eps".into(),
            });
        }
        let eps = if eps > 0.0 { eps } else { LAYER_NORM_EPS };
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return mismatch("layer_norm", xv.shape(), gv.shape());
        }
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(d) {
            let (normed, istd) = kernels::normalize(row, eps);
            xhat.extend(normed);
            inv_std.push(istd);
        }
        let data = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.data().iter().zip(bv.data()))
                    .map(|(h, (g, b))| h * g + b)
            })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Empty { op: "concat" })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return mismatch("concat", self.shape(first), s);
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if len == 0 || start + len > n {
            return Err(AutodiffError::Invalid {
                op: "slice_last",
                reason: format!("range {start}..{} out of bounds for width {n}", start + len),
            });
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceLast { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (batch, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return mismatch("transpose", &s, &[]),
        };
        let data = kernels::transpose_batched(xv.data(), batch, m, n);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let data: Vec<f64> = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_parts(shape, data), Op::SumLast(x), rg)
    }

    /// `out[i, j, :] = p[i, :] + q[j, :]` for `p: [n, d]`, `q: [m, d]`.
    pub fn pair_sum(&mut self, p: Var, q: Var) -> Result<Var> {
        let (sp, sq) = (self.shape(p).to_vec(), self.shape(q).to_vec());
        if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
            return mismatch("pair_sum", &sp, &sq);
        }
        let (n, m, d) = (sp[0], sq[0], sp[1]);
        let (pv, qv) = (self.value(p).data(), self.value(q).data());
        let mut data = Vec::with_capacity(n * m * d);
        for i in 0..n {
            let pi = &pv[i * d..(i + 1) * d];
            for j in 0..m {
                let qj = &qv[j * d..(j + 1) * d];
                data.extend(pi.iter().zip(qj).map(|(a, b)| a + b));
            }
        }
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(Tensor::from_parts(vec![n, m, d], data), Op::PairSum(p, q), rg))
    }

    /// Picks flat entries of `x` into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if indices.is_empty() {
            return Err(AutodiffError::Empty { op: "gather" });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.numel()) {
            return Err(AutodiffError::Invalid {
                op: "gather",
                reason: format!("index {bad} out of bounds for {} entries", xv.numel()),
            });
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], data),
            Op::Gather(x, indices.to_vec()),
            rg,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(a) {
                    let bt = kernels::transpose_batched(self.val(b), 1, k, n);
                    self.accumulate(grads, a, kernels::matmul(dy, &bt, m, n, k));
                }
                if self.requires_grad(b) {
                    let at = kernels::transpose_batched(self.val(a), 1, m, k);
                    self.accumulate(grads, b, kernels::matmul(&at, dy, k, m, n));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.val(a), self.val(b));
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for bi in 0..batch {
                    let dyb = &dy[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    let bt = kernels::transpose_batched(bb, 1, k, n);
                    da.extend(kernels::matmul(dyb, &bt, m, n, k));
                    let at = kernels::transpose_batched(ab, 1, m, k);
                    db.extend(kernels::matmul(&at, dyb, k, m, n));
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.iter().map(|g| -g).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                self.accumulate(grads, a, dy.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.accumulate(grads, b, dy.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            &Op::AddBias(x, bias) => {
                self.accumulate(grads, x, dy.to_vec());
                let n = self.val(bias).len();
                let mut db = vec![0.0; n];
                for row in dy.chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.accumulate(grads, bias, db);
            }
            &Op::ScaleRows(x, scale) => {
                let sv = self.val(scale);
                let n = node.value.last_dim();
                let dx = dy
                    .chunks(n)
                    .zip(sv)
                    .flat_map(|(row, &s)| row.iter().map(move |g| g * s))
                    .collect();
                self.accumulate(grads, x, dx);
                let ds = dy
                    .chunks(n)
                    .zip(self.val(x).chunks(n))
                    .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                self.accumulate(grads, scale, ds);
            }
            &Op::MulScalar(x, c) => self.accumulate(grads, x, dy.iter().map(|g| g * c).collect()),
            &Op::AddScalar(x) => self.accumulate(grads, x, dy.to_vec()),
            &Op::Relu(x) => {
                let xv = self.val(x);
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                let dx = dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Tanh(x) => {
                let dx = dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Exp(x) => {
                let dx = dy.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Ln(x) => {
                let dx = dy.iter().zip(self.val(x)).map(|(g, v)| g / v).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Sqrt(x) => {
                let dx = dy.iter().zip(y).map(|(g, s)| 0.5 * g / s).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Recip(x) => {
                let dx = dy.iter().zip(y).map(|(g, r)| -g * r * r).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Clamp(x, lo, hi) => {
                let dx = dy
                    .iter()
                    .zip(self.val(x))
                    .map(|(g, &v)| if v > lo && v < hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax(x) | &Op::MaskedSoftmax(x) => {
                let n = node.value.last_dim();
                let mut dx = Vec::with_capacity(dy.len());
                for (g, s) in dy.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
                    dx.extend(g.iter().zip(s).map(|(a, b)| b * (a - dot)));
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gain);
                let d = gv.len();
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(dy.len());
                    for ((g, h), &istd) in dy.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<f64> = g.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        dx.extend(
                            dh.iter()
                                .zip(h)
                                .map(|(a, b)| istd * (a - mean_dh - b * mean_dh_h)),
                        );
                    }
                    self.accumulate(grads, *x, dx);
                }
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (g, h) in dy.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        dg[c] += g[c] * h[c];
                        db[c] += g[c];
                    }
                }
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            &Op::SliceLast { x, start } => {
                let n = self.nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![0.0; self.val(x).len()];
                for (r, g) in dy.chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(g);
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, dy.to_vec()),
            &Op::Transpose(x) => {
                let s = node.value.shape();
                let (batch, m, n) = match s.len() {
                    2 => (1, s[0], s[1]),
                    _ => (s[0], s[1], s[2]),
                };
                self.accumulate(grads, x, kernels::transpose_batched(dy, batch, m, n));
            }
            &Op::Sum(x) => {
                let n = self.val(x).len();
                self.accumulate(grads, x, vec![dy[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.val(x).len();
                self.accumulate(grads, x, vec![dy[0] / n as f64; n]);
            }
            &Op::SumLast(x) => {
                let n = self.nodes[x.0].value.last_dim();
                let dx = dy.iter().flat_map(|&g| std::iter::repeat(g).take(n)).collect();
                self.accumulate(grads, x, dx);
            }
            &Op::PairSum(p, q) => {
                let s = node.value.shape();
                let (n, m, d) = (s[0], s[1], s[2]);
                let mut dp = vec![0.0; n * d];
                let mut dq = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let g = &dy[(i * m + j) * d..(i * m + j + 1) * d];
                        for c in 0..d {
                            dp[i * d + c] += g[c];
                            dq[j * d + c] += g[c];
                        }
                    }
                }
                self.accumulate(grads, p, dp);
                self.accumulate(grads, q, dq);
            }
            Op::Gather(x, indices) => {
                let mut dx = vec![0.0; self.val(*x).len()];
                for (&i, g) in indices.iter().zip(dy) {
                    dx[i] += g;
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}
