use rand::Rng;

use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x[r, c] + b[r]`
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    FlipGrad(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations. Node order is a topological order,
/// so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when `var` does not
    /// require a gradient or the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, factor), &[x])
    }

    /// Adds the vector `bias[r]` to every column of the 2-D `x[r, c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let (r, c) = (xs[0], xs[1]);
        let (xd, bd) = (self.data(x), self.data(bias));
        let mut out = xd.to_vec();
        for i in 0..r {
            for v in &mut out[i * c..(i + 1) * c] {
                *v += bd[i];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), &[x])
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales the
    /// survivors by `1/(1-p)`. `p == 0` returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let out = softmax_along(self.data(x), &shape, axis, None)?;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis where entries with `valid[j] == false` get
    /// exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let axis = shape.len() - 1;
        if valid.len() != shape[axis] {
            return Err(Error::shape("masked_softmax", &shape, &[valid.len()]));
        }
        let out = softmax_along(self.data(x), &shape, axis, Some(valid))?;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.layer_norm_axis(x, axis, gain, bias, eps)
    }

    /// Layer normalization over `axis`; `gain` and `bias` have that axis' extent.
    pub fn layer_norm_axis(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!("layer_norm axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut normed = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| xd[idx(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (xd[idx(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..n {
                    let h = (xd[idx(i)] - mean) * inv;
                    normed[idx(i)] = h;
                    out[idx(i)] = gd[i] * h + bd[i];
                }
                inv_std.push(inv);
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            normed,
            inv_std,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x, gain, bias]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Input(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Slice { x, axis, start }, &[x]))
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() {
            return Err(Error::shape("select", &shape, &[axis, indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Input(format!(
                "select index {bad} out of range for extent {}",
                shape[axis]
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let from = (o * n + i) * inner;
                out.extend_from_slice(&xd[from..from + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = indices.len();
        let op = Op::Select {
            x,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(new_shape, out), op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-softmax of `targets` for 2-D `logits[batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target {bad} out of range for {c} classes")));
        }
        let probs = softmax_along(self.data(logits), &shape, 1, None)?;
        let ld = self.data(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Identity forward whose backward negates the incoming gradient. Exists
    /// only so gradient-check tooling can be exercised against a known fault.
    #[doc(hidden)]
    pub fn flip_grad(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::FlipGrad(x), &[x])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, contribution) in self.input_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let shape = node.value.shape();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut out = Vec::new();
                if self.wants(*a) {
                    out.push((*a, kernels::matmul_nt(g, self.data(*b), m, n, k)));
                }
                if self.wants(*b) {
                    out.push((*b, kernels::matmul_tn(self.data(*a), g, m, k, n)));
                }
                out
            }
            Op::Transpose(x) => vec![(*x, kernels::transpose(g, shape[0], shape[1]))],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::AddBias(x, b) => {
                let (r, c) = (shape[0], shape[1]);
                let gb = (0..r).map(|i| g[i * c..(i + 1) * c].iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Gelu(x) => {
                let gx = g.iter().zip(self.data(*x)).map(|(g, &v)| g * gelu_grad(v)).collect();
                vec![(*x, gx)]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                normed,
                inv_std,
            } => {
                let (outer, n, inner) = axis_split(shape, *axis);
                let gd = self.data(*gain);
                let mut gx = vec![0.0; normed.len()];
                let mut gg = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let inv = inv_std[o * inner + j];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for i in 0..n {
                            let dh = g[idx(i)] * gd[i];
                            sum_dh += dh;
                            sum_dh_h += dh * normed[idx(i)];
                            gg[i] += g[idx(i)] * normed[idx(i)];
                            gbias[i] += g[idx(i)];
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            let dh = g[idx(i)] * gd[i];
                            gx[idx(i)] = inv / nf * (nf * dh - sum_dh - normed[idx(i)] * sum_dh_h);
                        }
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gbias)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let len = self.shape(*v)[*axis] * inner;
                        parts[k].extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.shape(*x);
                let (outer, n, inner) = axis_split(xshape, *axis);
                let len = shape[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    gx[from..from + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Select { x, axis, indices } => {
                let xshape = self.shape(*x);
                let (outer, n, inner) = axis_split(xshape, *axis);
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let to = (o * n + i) * inner;
                        let from = (o * indices.len() + k) * inner;
                        for t in 0..inner {
                            gx[to + t] += g[from + t];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = targets.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] -= g[0] / b;
                }
                vec![(*logits, gx)]
            }
            Op::FlipGrad(x) => vec![(*x, g.iter().map(|v| -v).collect())],
        }
    }
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize, valid: Option<&[bool]>) -> Result<Vec<f64>> {
    let (outer, n, inner) = axis_split(shape, axis);
    let ok = |i: usize| valid.is_none_or(|v| v[i]);
    if !(0..n).any(ok) {
        return Err(Error::Input("softmax over an entirely masked axis".into()));
    }
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n)
                .filter(|&i| ok(i))
                .map(|i| x[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in (0..n).filter(|&i| ok(i)) {
                let e = (x[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in (0..n).filter(|&i| ok(i)) {
                out[idx(i)] /= total;
            }
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
