use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity applied after a convolution or dense layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

/// Per-channel mean and biased variance of a batch-norm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Frobenius(Var, Var),
    Relu(Var),
    Tanh(Var),
    /// Elementwise product with a constant (dropout masks, frozen affine maps).
    MulConst(Var, Vec<f64>),
    /// Per-channel product with a constant vector; x is `[rows, channels]`.
    ScaleColumns(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications in evaluation order.
///
/// Every operation appends exactly one node whose inputs precede it, so the
/// node list is already a topological order and the backward pass is a single
/// reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor of the variable's shape; zeros when no path reached it.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches value"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(msg: String) -> Error {
    Error::Argument(msg)
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Adds `b` (`[n]`) to every row of `x` (`[m, n]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err(format!("add_bias of {sx:?} and {sb:?}")));
        }
        let n = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, rg, Op::AddBias(x, b)))
    }

    /// Elementwise sum of two equally shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, y)| *o += y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Batched Frobenius inner product: item `i` of `x` (`[B, ...]`) against
    /// filter `d` of `w` (`[D, ...]`), giving `[B, D]`. Trailing axes must match.
    pub fn frobenius_batch(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() < 2 || sw.len() < 2 || sx[1..] != sw[1..] {
            return Err(shape_err(format!(
                "frobenius_batch of {sx:?} against {sw:?}"
            )));
        }
        let (b, d) = (sx[0], sw[0]);
        let p: usize = sx[1..].iter().product();
        let mut out = vec![0.0; b * d];
        gemm(
            b,
            p,
            d,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(vec![b, d], out)?, rg, Op::Frobenius(x, w)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(x);
        self.push(out, rg, Op::Tanh(x))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Identity => x,
        }
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(self.mul_const(x, mask))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        assert_eq!(c.len(), self.value(x).numel(), "mul_const length mismatch");
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&c).for_each(|(o, m)| *o *= m);
        let rg = self.rg(x);
        self.push(out, rg, Op::MulConst(x, c))
    }

    /// Training-mode batch normalization over the rows of `x` (`[rows, C]`),
    /// without learned scale or shift. Returns the batch statistics so the
    /// caller can maintain running averages.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] == 0 {
            return Err(shape_err(format!("batch_norm over {sx:?}")));
        }
        let (m, c) = (sx[0], sx[1]);
        let data = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in data.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        mean.iter_mut().for_each(|s| *s /= m as f64);
        let mut var = vec![0.0; c];
        for row in data.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = data.to_vec();
        for row in xhat.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let out = Tensor::new(sx, xhat.clone())?;
        let rg = self.rg(x);
        let v = self.push(out, rg, Op::BatchNorm { x, xhat, inv_std });
        Ok((v, BatchStats { mean, var, rows: m }))
    }

    /// Evaluation-mode batch normalization with frozen statistics: an affine
    /// map `(x - mean) / sqrt(var + eps)` per channel.
    pub fn batch_norm_eval(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] != mean.len() || mean.len() != var.len() {
            return Err(shape_err(format!(
                "batch_norm over {sx:?} with {} channels of statistics",
                mean.len()
            )));
        }
        let c = sx[1];
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * scale[j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::ScaleColumns(x, scale)))
    }

    /// Mean softmax cross-entropy of `logits` (`[B, C]`) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() || sl[0] == 0 {
            return Err(shape_err(format!(
                "softmax_cross_entropy of {sl:?} against {} targets",
                targets.len()
            )));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(format!("target class {t} with only {c} logits")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
            loss -= row[t].ln();
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Softmax over all entries of `x`, keeping its shape.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let max = out.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in out.data_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        out.data_mut().iter_mut().for_each(|v| *v /= z);
        let rg = self.rg(x);
        self.push(out, rg, Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Stacks `[m_i, C]` blocks into `[sum m_i, C]`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("concat_rows of nothing".into()));
        };
        let width = self.value(first).row_len();
        let tail = self.shape(first)[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            if self.shape(x).len() < 2 || self.shape(x)[1..] != tail[..] {
                return Err(shape_err(format!(
                    "concat_rows of {:?} onto rows of {tail:?}",
                    self.shape(x)
                )));
            }
            rows += self.value(x).rows();
            data.extend_from_slice(self.value(x).data());
        }
        debug_assert_eq!(data.len(), rows * width);
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::ConcatRows(xs.to_vec())))
    }

    /// Row `i` of the output is row `index[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err(format!("gather_rows from {sx:?}")));
        }
        let (m, c) = (sx[0], sx[1]);
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= m) {
            return Err(shape_err(format!(
                "gather_rows index {bad} beyond {m} rows"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; index.len() * c];
        for (dst, r) in out.chunks_mut(c.max(1)).zip(&index) {
            if let Some(r) = *r {
                dst.copy_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), c], out)?,
            rg,
            Op::GatherRows { x, index },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0; self.value(output).numel()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        shapes.truncate(output.0 + 1);
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, 0.0, &mut db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g);
                if self.rg(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Frobenius(x, w) => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (b, d) = (sx[0], sw[0]);
                let p: usize = sx[1..].iter().product();
                if self.rg(*x) {
                    let mut dx = vec![0.0; b * p];
                    gemm(
                        b,
                        d,
                        p,
                        g,
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, &dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; d * p];
                    gemm(d, b, p, g, true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, &dw);
                }
            }
            Op::Relu(x) => {
                // Subgradient 0 at the kink.
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::MulConst(x, c) => {
                let dx: Vec<f64> = g.iter().zip(c).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::ScaleColumns(x, scale) => {
                let c = scale.len();
                let mut dx = g.to_vec();
                for row in dx.chunks_mut(c) {
                    row.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                let c = inv_std.len();
                let m = xhat.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                let mf = m as f64;
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), xrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        drow[j] = inv_std[j] / mf * (mf * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_mut(c).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, &dl);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.accumulate(grads, x, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                if self.rg(*x) {
                    let c = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (grow, r) in g.chunks(c.max(1)).zip(index) {
                        if let Some(r) = *r {
                            dx[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
        }
    }
}
