//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the tape, so node ids are already in
//! topological order; `backward` walks the tape once, in reverse.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Axis over which a normalization layer computes its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Over the feature axis, per position.
    Layer,
    /// Over every stacked row, per feature.
    Batch,
    /// Over the time axis of each window, per feature.
    Instance,
}

impl NormKind {
    pub const ALL: [NormKind; 3] = [NormKind::Layer, NormKind::Batch, NormKind::Instance];
}

#[derive(Debug, Clone, Copy)]
struct GroupLayout {
    kind: NormKind,
    rows: usize,
    cols: usize,
    group_rows: usize,
}

impl GroupLayout {
    fn groups(&self) -> usize {
        match self.kind {
            NormKind::Layer => self.rows,
            NormKind::Batch => self.cols,
            NormKind::Instance => (self.rows / self.group_rows) * self.cols,
        }
    }

    fn group_len(&self) -> usize {
        match self.kind {
            NormKind::Layer => self.cols,
            NormKind::Batch => self.rows,
            NormKind::Instance => self.group_rows,
        }
    }

    #[inline]
    fn elem(&self, g: usize, e: usize) -> usize {
        match self.kind {
            NormKind::Layer => g * self.cols + e,
            NormKind::Batch => e * self.cols + g,
            NormKind::Instance => {
                let (block, c) = (g / self.cols, g % self.cols);
                (block * self.group_rows + e) * self.cols + c
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    Act(Var, Activation),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: GroupLayout,
        xhat: Tensor,
        inv_std: Vec<f64>,
        means: Vec<f64>,
        vars: Vec<f64>,
    },
    FixedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        windows: usize,
        heads: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus the gradients of its last backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Row-stochastic attention weights saved by an attention node, laid out
    /// `[window][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Per-group means and population variances computed by a batch-statistics
    /// normalization node.
    pub fn norm_statistics(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Norm { means, vars, .. } => Some((means, vars)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x * w + b` with `b` a `1 x p` row added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(Error::dim("linear", &xv.shape(), &wv.shape()));
        }
        if bv.shape() != [1, wv.cols()] {
            return Err(Error::dim("linear bias", &wv.shape(), &bv.shape()));
        }
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm_nn(xv, wv, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out = if av.shape() == bv.shape() {
            av.zip_map(bv, f)
        } else if bv.len() == 1 {
            let s = bv.item();
            av.map(|x| f(x, s))
        } else if av.len() == 1 {
            let s = av.item();
            bv.map(|y| f(s, y))
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(op, &av.shape(), &bv.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(a);
        self.push(out, Op::Act(a, act), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::LeakyRelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean of `(a - b)^2` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::dim("concat_cols", &av.shape(), &bv.shape()));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::from_vec(av.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Inverted dropout with drop probability `p`. A probability of zero
    /// records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let mut out = v.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Normalization with statistics computed from `x` itself along the
    /// axis chosen by `kind`, followed by a per-column affine `gamma`, `beta`.
    /// `group_rows` is the window length, used by instance normalization.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        group_rows: usize,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = xv.shape();
        self.check_affine("norm", [rows, cols], gamma, beta)?;
        if kind == NormKind::Instance && (group_rows == 0 || rows % group_rows != 0) {
            return Err(Error::dim("instance norm", &[rows, cols], &[group_rows]));
        }
        let layout = GroupLayout {
            kind,
            rows,
            cols,
            group_rows,
        };
        let n = layout.group_len() as f64;
        let groups = layout.groups();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(groups);
        let mut means = Vec::with_capacity(groups);
        let mut vars = Vec::with_capacity(groups);
        let data = xv.data();
        for g in 0..groups {
            let mean = (0..layout.group_len())
                .map(|e| data[layout.elem(g, e)])
                .sum::<f64>()
                / n;
            let var = (0..layout.group_len())
                .map(|e| {
                    let d = data[layout.elem(g, e)] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let is = 1.0 / (var + eps).sqrt();
            for e in 0..layout.group_len() {
                let i = layout.elem(g, e);
                xhat.data_mut()[i] = (data[i] - mean) * is;
            }
            inv_std.push(is);
            means.push(mean);
            vars.push(var);
        }
        let out = self.affine_out(&xhat, gamma, beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                means,
                vars,
            },
            rg,
        ))
    }

    /// Per-column normalization with externally supplied statistics, as used
    /// by batch normalization at inference time.
    pub fn norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [rows, cols] = xv.shape();
        self.check_affine("norm_fixed", [rows, cols], gamma, beta)?;
        if mean.len() != cols || var.len() != cols {
            return Err(Error::dim("norm_fixed stats", &[rows, cols], &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..rows {
            for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let out = self.affine_out(&xhat, gamma, beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, shape: [usize; 2], gamma: Var, beta: Var) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [1, shape[1]] {
                return Err(Error::dim(op, &shape, &self.shape(p)));
            }
        }
        Ok(())
    }

    fn affine_out(&self, xhat: &Tensor, gamma: Var, beta: Var) -> Tensor {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        out
    }

    /// Multi-head scaled dot-product attention over `windows` independent
    /// blocks of stacked rows. Queries are `(windows * lq) x d`, keys and
    /// values `(windows * lk) x d`; each head sees `d / heads` columns and
    /// scores are scaled by `1 / sqrt(d / heads)`. Heads are concatenated
    /// back into `d` columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, windows: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.shape() != kv.shape() {
            return Err(Error::dim("attention", &qv.shape(), &kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention heads", &qv.shape(), &[heads]));
        }
        if windows == 0 || qv.rows() % windows != 0 || kv.rows() % windows != 0 {
            return Err(Error::dim("attention windows", &qv.shape(), &[windows]));
        }
        let (lq, lk, dh) = (qv.rows() / windows, kv.rows() / windows, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut weights = vec![0.0; windows * heads * lq * lk];
        let mut row = vec![0.0; lk];
        for w in 0..windows {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = &qv.row(w * lq + i)[off..off + dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv.row(w * lk + j)[off..off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut row);
                    let base = ((w * heads + h) * lq + i) * lk;
                    weights[base..base + lk].copy_from_slice(&row);
                    let orow = &mut out.row_mut(w * lq + i)[off..off + dh];
                    for (j, &a) in row.iter().enumerate() {
                        let vj = &vv.row(w * lk + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                windows,
                heads,
                weights,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`; gradients land on every node that
    /// requires them. A second call needs `zero_grad` first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor) {
        // Gradients for each input are computed while `self.nodes` is borrowed
        // immutably, then accumulated.
        let mut contributions: Vec<(Var, Tensor)> = Vec::with_capacity(3);
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_nt(g, bv, &mut da);
                    contributions.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, g, &mut db);
                    contributions.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm_nt(g, wv, &mut dx);
                    contributions.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm_tn(xv, g, &mut dw);
                    contributions.push((*w, dw));
                }
                if self.rg(*b) {
                    contributions.push((*b, g.col_sums()));
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = binary_grads(*kind, av, bv, g);
                if self.rg(*a) {
                    contributions.push((*a, reduce_to(ga, av)));
                }
                if self.rg(*b) {
                    contributions.push((*b, reduce_to(gb, bv)));
                }
            }
            Op::Scale(a, f) => contributions.push((*a, g.map(|x| x * f))),
            Op::Act(a, act) => {
                let (x, y) = (self.value(*a), &node.value);
                let mut d = g.clone();
                for ((o, &xi), &yi) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *o *= act.derivative(xi, yi);
                }
                contributions.push((*a, d));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                contributions.push((*a, g.zip_map(x, |gi, xi| 2.0 * gi * xi)));
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                contributions.push((*a, Tensor::full(r, c, g.item())));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(*a);
                contributions.push((*a, Tensor::full(r, c, g.item() / (r * c) as f64)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (&yi, &gi)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - dot);
                    }
                }
                contributions.push((*a, d));
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let mut da = Tensor::zeros(g.rows(), ca);
                let mut db = Tensor::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                contributions.push((*a, da));
                contributions.push((*b, db));
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                for (o, m) in d.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                contributions.push((*x, d));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                ..
            } => {
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let cols = layout.cols;
                    let scaled: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * gam[i % cols])
                        .collect();
                    let n = layout.group_len();
                    let mut dx = Tensor::zeros(layout.rows, cols);
                    for (grp, &is) in inv_std.iter().enumerate() {
                        let (mut mg, mut mgx) = (0.0, 0.0);
                        for e in 0..n {
                            let i = layout.elem(grp, e);
                            mg += scaled[i];
                            mgx += scaled[i] * xhat.data()[i];
                        }
                        mg /= n as f64;
                        mgx /= n as f64;
                        for e in 0..n {
                            let i = layout.elem(grp, e);
                            dx.data_mut()[i] = is * (scaled[i] - mg - xhat.data()[i] * mgx);
                        }
                    }
                    contributions.push((*x, dx));
                }
                push_affine_grads(&mut contributions, g, xhat, *gamma, *beta);
            }
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let cols = g.cols();
                let mut dx = g.clone();
                for (i, o) in dx.data_mut().iter_mut().enumerate() {
                    *o *= gam[i % cols] * inv_std[i % cols];
                }
                contributions.push((*x, dx));
                push_affine_grads(&mut contributions, g, xhat, *gamma, *beta);
            }
            Op::Attention {
                q,
                k,
                v,
                windows,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let (lq, lk, dh) = (qv.rows() / windows, kv.rows() / windows, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.rows(), d);
                let mut dk = Tensor::zeros(kv.rows(), d);
                let mut dv = Tensor::zeros(vv.rows(), d);
                let mut da = vec![0.0; lk];
                for w in 0..*windows {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..lq {
                            let base = ((w * heads + h) * lq + i) * lk;
                            let a = &weights[base..base + lk];
                            let go = &g.row(w * lq + i)[off..off + dh];
                            for (j, daj) in da.iter_mut().enumerate() {
                                let vj = &vv.row(w * lk + j)[off..off + dh];
                                *daj = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                let dvj = &mut dv.row_mut(w * lk + j)[off..off + dh];
                                for (o, gx) in dvj.iter_mut().zip(go) {
                                    *o += a[j] * gx;
                                }
                            }
                            let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                            let qi = &qv.row(w * lq + i)[off..off + dh];
                            for j in 0..lk {
                                let ds = a[j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(w * lk + j)[off..off + dh];
                                let dqi = &mut dq.row_mut(w * lq + i)[off..off + dh];
                                for (o, x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.row_mut(w * lk + j)[off..off + dh];
                                for (o, x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                contributions.push((*q, dq));
                contributions.push((*k, dk));
                contributions.push((*v, dv));
            }
        }
        for (var, grad) in contributions {
            self.accumulate(var, grad);
        }
    }
}

fn push_affine_grads(out: &mut Vec<(Var, Tensor)>, g: &Tensor, xhat: &Tensor, gamma: Var, beta: Var) {
    let mut dgamma = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (c, o) in dgamma.data_mut().iter_mut().enumerate() {
            *o += g.get(r, c) * xhat.get(r, c);
        }
    }
    out.push((gamma, dgamma));
    out.push((beta, g.col_sums()));
}

fn binary_grads(kind: Binary, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    // Expand scalar operands so both sides see the output shape.
    let expand = |t: &Tensor| {
        if t.shape() == g.shape() {
            t.clone()
        } else {
            Tensor::full(g.rows(), g.cols(), t.item())
        }
    };
    match kind {
        Binary::Add => (g.clone(), g.clone()),
        Binary::Sub => (g.clone(), g.map(|x| -x)),
        Binary::Mul => {
            let (ea, eb) = (expand(a), expand(b));
            (g.zip_map(&eb, |x, y| x * y), g.zip_map(&ea, |x, y| x * y))
        }
    }
}

fn reduce_to(grad: Tensor, like: &Tensor) -> Tensor {
    if grad.shape() == like.shape() {
        grad
    } else {
        Tensor::scalar(grad.sum())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
    }

    /// Central-difference check of d(build)/d(inputs) against the tape.
    fn check_gradients(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (mut g, vars, out) = eval(inputs);
        g.backward(out).unwrap();
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[idx]).cloned().unwrap_or(Tensor::zeros(input.rows(), input.cols()));
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[e] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < tol, "input {idx} elem {e}: analytic {a} numeric {numeric} rel {rel}");
            }
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 9.0]]));
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out), g.value(m));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(4, 3, &mut rng);
        let b = random(3, 5, &mut rng);
        check_gradients(
            &[a, b],
            |g, v| {
                let p = g.matmul(v[0], v[1]).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 3.0, 3.0], vec![0.0, 2f64.ln(), 0.0]]));
        let y = g.softmax_rows(x);
        let y = g.value(y);
        for c in 0..3 {
            assert!((y.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        // the third entry of the second row only pads the shape; check the pair separately
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 2f64.ln()]]));
        let y = g.softmax_rows(x);
        let y = g.value(y);
        assert!((y.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(3, 4, &mut rng);
        let w = random(3, 4, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax_rows(xv);
        for r in 0..3 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(r).iter().all(|p| (0.0..=1.0).contains(p)));
        }
        check_gradients(
            &[x, w],
            |g, v| {
                let s = g.softmax_rows(v[0]);
                let p = g.mul(s, v[1]).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![-1.0, 2.0, 0.0]]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
        let l = g.leaky_relu(x);
        assert_eq!(g.value(l).data()[0], -LEAKY_SLOPE);
    }

    #[test]
    fn smooth_activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(3, 3, &mut rng);
        for act in [Activation::Tanh, Activation::Sigmoid] {
            check_gradients(
                &[x.clone()],
                move |g, v| {
                    let y = g.activation(v[0], act);
                    let y2 = g.square(y);
                    g.sum(y2)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn broadcast_scalar_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(2, 3, &mut rng);
        let s = random(1, 1, &mut rng);
        check_gradients(
            &[x, s],
            |g, v| {
                let a = g.mul(v[0], v[1]).unwrap();
                let b = g.sub(v[1], a).unwrap();
                let c = g.add(b, v[0]).unwrap();
                let d = g.square(c);
                g.mean(d)
            },
            1e-6,
        );
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 2));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_linear_and_quadratic_cases() {
        let w0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut g = Graph::new();
        let w = g.leaf(w0.clone(), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &Tensor::ones(2, 2));

        let mut g = Graph::new();
        let w = g.leaf(w0.clone(), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &w0.map(|x| 2.0 * x));
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::ones(2, 2), true);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.zero_grad();
        g.backward(s).unwrap();
    }

    #[test]
    fn linear_concat_dropout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(4, 3, &mut rng);
        let w = random(5, 2, &mut rng);
        let b = random(1, 2, &mut rng);
        let c = random(4, 2, &mut rng);
        check_gradients(
            &[x, w, b, c],
            |g, v| {
                let xc = g.concat_cols(v[0], v[3]).unwrap();
                let y = g.linear(xc, v[1], v[2]).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let y = g.dropout(y, 0.3, &mut rng);
                let y = g.tanh(y);
                g.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn norm_gradients_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(6, 4, &mut rng);
        let gamma = random(1, 4, &mut rng);
        let beta = random(1, 4, &mut rng);
        let w = random(6, 4, &mut rng);
        for kind in NormKind::ALL {
            check_gradients(
                &[x.clone(), gamma.clone(), beta.clone(), w.clone()],
                move |g, v| {
                    let y = g.norm(v[0], v[1], v[2], kind, 3, 1e-5).unwrap();
                    let y = g.mul(y, v[3]).unwrap();
                    let y = g.tanh(y);
                    g.sum(y)
                },
                1e-5,
            );
        }
        check_gradients(
            &[x, gamma, beta, w],
            |g, v| {
                let y = g
                    .norm_fixed(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.0, 2.0, 0.5, 0.1], 1e-5)
                    .unwrap();
                let y = g.mul(y, v[3]).unwrap();
                g.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn norm_axes_standardize() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Large spread keeps var / (var + eps) within 1e-6 of one.
        let x = random(6, 4, &mut rng).map(|v| 40.0 * v + 3.0);
        for kind in NormKind::ALL {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let gam = g.constant(Tensor::ones(1, 4));
            let bet = g.constant(Tensor::zeros(1, 4));
            let y = g.norm(xv, gam, bet, kind, 3, 1e-5).unwrap();
            let y = g.value(y);
            let groups: Vec<Vec<f64>> = match kind {
                NormKind::Layer => (0..6).map(|r| y.row(r).to_vec()).collect(),
                NormKind::Batch => (0..4).map(|c| (0..6).map(|r| y.get(r, c)).collect()).collect(),
                NormKind::Instance => (0..2)
                    .flat_map(|b| (0..4).map(move |c| (b, c)))
                    .map(|(b, c)| (0..3).map(|e| y.get(b * 3 + e, c)).collect())
                    .collect(),
            };
            for grp in groups {
                let n = grp.len() as f64;
                let mean = grp.iter().sum::<f64>() / n;
                let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-9, "{kind:?} mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "{kind:?} var {var}");
            }
        }
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random(6, 4, &mut rng);
        let k = random(8, 4, &mut rng);
        let v = random(8, 4, &mut rng);
        let w = random(6, 4, &mut rng);
        check_gradients(
            &[q, k, v, w],
            |g, x| {
                let o = g.attention(x[0], x[1], x[2], 2, 2).unwrap();
                let o = g.mul(o, x[3]).unwrap();
                g.sum(o)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(3, 4));
        assert!(matches!(g.attention(q, q, q, 1, 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let x = g.constant(random(5, 4, &mut rng));
            let y = g.attention(x, x, x, 1, 2).unwrap();
            let y = g.dropout(y, 0.5, &mut rng);
            g.value(y).clone()
        };
        assert_eq!(build().data(), build().data());
    }
}
