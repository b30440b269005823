//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every forward call appends a node holding its value and enough context to
//! run its analytic backward. [`Tape::backward`] replays the nodes in reverse
//! order. All tensors are treated as row-major matrices over their last axis.

use crate::error::{Error, Result};
use crate::ops::{self, Activation, NormCache};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    Scale(Var, T),
    ColAffine(Var, Vec<T>),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        cache: NormCache<T>,
    },
    LayerNormBias(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherPerRow(Var, Vec<usize>),
    NormalizeRows(Var),
    Cosine {
        a: Var,
        c: Var,
    },
    GroupMean(Var, usize),
    Blend {
        x: Var,
        gamma: Var,
        corr: Var,
    },
    Attention {
        qkv: Var,
        geometry: AttentionGeometry,
        probs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor<T>,
        probs: Tensor<T>,
    },
    Reshape(Var),
    Sum(Var),
}

/// Token geometry for patch attention: rows are ordered `(batch, patch, pixel)`
/// and each pixel slot attends across the patches of its own image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub patches: usize,
    pub pixels: usize,
    pub heads: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut value = x.clone();
        value.add_assign(y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if self.value(b).numel() != d {
            return Err(Error::shape("add_row", format!("{d} channels, bias {:?}", self.value(b).shape())));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bias[i % d];
        }
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[(k·m)×d] + t[m×d]`, with `t` repeated over the `k` row blocks.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let xv = self.value(x);
        let tv = self.value(t);
        if tv.numel() == 0 || xv.numel() % tv.numel() != 0 || xv.rows_cols().1 != tv.rows_cols().1 {
            return Err(Error::shape("add_tiled", format!("{:?} + {:?}", xv.shape(), tv.shape())));
        }
        let m = tv.numel();
        let mut value = xv.clone();
        let td = tv.data().to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += td[i % m];
        }
        Ok(self.push(value, Op::AddTiled(x, t), &[x, t]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let mut value = x.clone();
        for (v, &w) in value.data_mut().iter_mut().zip(y.data()) {
            *v *= w;
        }
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `i` of `x[n×d]` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols();
        if self.value(s).numel() != n {
            return Err(Error::shape("mul_rows", format!("{n} rows, scale {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= sv[i / d];
        }
        Ok(self.push(value, Op::MulRows(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut value = self.value(x).clone();
        value.scale_assign(s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `x * scale[j] + shift[j]` per channel with constant coefficients.
    pub fn col_affine(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if scale.len() != d || shift.len() != d {
            return Err(Error::shape("col_affine", format!("{d} channels, {} coefficients", scale.len())));
        }
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * scale[j] + shift[j];
        }
        Ok(self.push(value, Op::ColAffine(x, scale), &[x]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = ops::activation(self.value(x), kind);
        self.push(value, Op::Act(x, kind), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let (n, _) = value.rows_cols();
        for r in 0..n {
            ops::softmax_row_inplace(value.row_mut(r));
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, cache) = ops::layer_norm_fwd(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        )?;
        // the normalized-and-scaled part and the bias are separate nodes so
        // the bias gradient is a plain column sum
        let zero_bias = {
            let mut v = value;
            let b = self.value(bias).data().to_vec();
            let d = b.len();
            for (i, x) in v.data_mut().iter_mut().enumerate() {
                *x -= b[i % d];
            }
            v
        };
        let scaled = self.push(zero_bias, Op::LayerNorm { x, gain, cache }, &[x, gain]);
        let (_, d) = self.value(scaled).rows_cols();
        let mut value = self.value(scaled).clone();
        let b = self.value(bias).data().to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[i % d];
        }
        Ok(self.push(value, Op::LayerNormBias(scaled, bias), &[scaled, bias]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, _) = self.value(x).rows_cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let value = self.value(x).select_rows(&rows);
        Ok(self.push(value, Op::GatherRows(x, rows), &[x]))
    }

    /// `out[rows[i]] += x[i]` into an `n_out`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: Vec<usize>, n_out: usize) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols();
        if rows.len() != n || rows.iter().any(|&r| r >= n_out) {
            return Err(Error::shape("scatter_rows", format!("{n} rows into {n_out}")));
        }
        let mut value = Tensor::zeros(&[n_out, d]);
        {
            let xv = self.value(x);
            for (i, &r) in rows.iter().enumerate() {
                for (o, &v) in value.row_mut(r).iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
        }
        Ok(self.push(value, Op::ScatterRows(x, rows), &[x]))
    }

    /// For `x[n×m]` and `cols` of length `n·k`, returns `out[i, j] = x[i, cols[i·k + j]]`.
    pub fn gather_per_row(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let (n, m) = self.value(x).rows_cols();
        if n == 0 || cols.len() % n != 0 || cols.iter().any(|&c| c >= m) {
            return Err(Error::shape("gather_per_row", format!("{} indices for {n}×{m}", cols.len())));
        }
        let k = cols.len() / n;
        let xv = self.value(x);
        let data = (0..n * k).map(|i| xv.data()[(i / k) * m + cols[i]]).collect();
        let value = Tensor::new(vec![n, k], data)?;
        Ok(self.push(value, Op::GatherPerRow(x, cols), &[x]))
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let (n, _) = value.rows_cols();
        for r in 0..n {
            let row = value.row_mut(r);
            let s: T = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(value, Op::NormalizeRows(x), &[x])
    }

    /// Cosine similarity of rows of `a[n×d]` with rows of `c[e×d]`.
    pub fn cosine(&mut self, a: Var, c: Var) -> Result<Var> {
        let value = ops::cosine_matrix(self.value(a), self.value(c))?;
        Ok(self.push(value, Op::Cosine { a, c }, &[a, c]))
    }

    /// Mean over consecutive blocks of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols();
        if group == 0 || n % group != 0 {
            return Err(Error::shape("group_mean", format!("{n} rows in groups of {group}")));
        }
        let g = n / group;
        let inv = T::one() / T::c(group as f64);
        let xv = self.value(x);
        let mut value = Tensor::zeros(&[g, d]);
        for r in 0..n {
            let o = value.row_mut(r / group);
            for (a, &b) in o.iter_mut().zip(xv.row(r)) {
                *a += b * inv;
            }
        }
        Ok(self.push(value, Op::GroupMean(x, group), &[x]))
    }

    /// `(1 − γ)·x + γ·corr`, with scalar `γ` and `corr[d]` broadcast over rows.
    pub fn blend(&mut self, x: Var, gamma: Var, corr: Var) -> Result<Var> {
        let (_, d) = self.value(x).rows_cols();
        if self.value(gamma).numel() != 1 || self.value(corr).numel() != d {
            return Err(Error::shape("blend", "gamma must be scalar and corr match channels"));
        }
        let g = self.value(gamma).data()[0];
        let cv = self.value(corr).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = (T::one() - g) * *v + g * cv[i % d];
        }
        Ok(self.push(value, Op::Blend { x, gamma, corr }, &[x, gamma, corr]))
    }

    /// Multi-head self-attention core on packed `qkv[rows×3d]`, returning the
    /// concatenated head outputs `[rows×d]`.
    pub fn attention(&mut self, qkv: Var, geometry: AttentionGeometry) -> Result<Var> {
        let AttentionGeometry {
            batch,
            patches,
            pixels,
            heads,
        } = geometry;
        let (rows, three_d) = self.value(qkv).rows_cols();
        if rows != batch * patches * pixels || three_d % 3 != 0 || heads == 0 || (three_d / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {:?} with geometry {geometry:?}", self.value(qkv).shape()),
            ));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let q = self.value(qkv).data();
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = vec![T::zero(); batch * pixels * heads * patches * patches];
        let row = |b: usize, p: usize, n: usize| (b * patches + p) * pixels + n;
        let mut scores = vec![T::zero(); patches];
        for b in 0..batch {
            for n in 0..pixels {
                for h in 0..heads {
                    let block = ((b * pixels + n) * heads + h) * patches * patches;
                    for i in 0..patches {
                        let qi = &q[row(b, i, n) * three_d + h * dh..][..dh];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let kj = &q[row(b, j, n) * three_d + d + h * dh..][..dh];
                            *s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        }
                        ops::softmax_row_inplace(&mut scores);
                        probs[block + i * patches..block + (i + 1) * patches].copy_from_slice(&scores);
                        let o = &mut out.data_mut()[row(b, i, n) * d + h * dh..][..dh];
                        for (j, &a) in scores.iter().enumerate() {
                            let vj = &q[row(b, j, n) * three_d + 2 * d + h * dh..][..dh];
                            for (ov, &vv) in o.iter_mut().zip(vj) {
                                *ov += a * vv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { qkv, geometry, probs }, &[qkv]))
    }

    /// Mean over rows of `−Σ target·log softmax(logits)`; returns a scalar.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != target.numel() {
            return Err(Error::shape("soft_cross_entropy", format!("{:?} vs {:?}", lv.shape(), target.shape())));
        }
        let (n, _) = lv.rows_cols();
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for r in 0..n {
            let row = lv.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for (j, &v) in row.iter().enumerate() {
                loss -= target.row(r)[j] * (v - lse);
            }
            ops::softmax_row_inplace(probs.row_mut(r));
        }
        let value = Tensor::scalar(loss / T::c(n as f64));
        Ok(self.push(value, Op::SoftCrossEntropy { logits, target, probs }, &[logits]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    ops::gemm_nt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    ops::gemm_tn_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let gv = Tensor::new(self.value(*v).shape().to_vec(), g.data().to_vec()).unwrap();
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
            Op::AddRow(x, b) | Op::LayerNormBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    let d = gb.numel();
                    for (i, &v) in g.data().iter().enumerate() {
                        gb.data_mut()[i % d] += v;
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::AddTiled(x, t) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*t) {
                    let mut gt = Tensor::zeros(self.value(*t).shape());
                    let m = gt.numel();
                    for (i, &v) in g.data().iter().enumerate() {
                        gt.data_mut()[i % m] += v;
                    }
                    accumulate(&mut grads[t.0], gt);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(*v) {
                        let mut gv = Tensor::zeros(self.value(*v).shape());
                        for ((o, &gg), &w) in gv.data_mut().iter_mut().zip(g.data()).zip(self.value(*other).data()) {
                            *o = gg * w;
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
            Op::MulRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let (_, d) = xv.rows_cols();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= sv.data()[i / d];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*s) {
                    let mut gs = Tensor::zeros(sv.shape());
                    for (i, (&gg, &xx)) in g.data().iter().zip(xv.data()).enumerate() {
                        gs.data_mut()[i / d] += gg * xx;
                    }
                    accumulate(&mut grads[s.0], gs);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let mut gx = g.clone();
                    gx.scale_assign(*s);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ColAffine(x, scale) => {
                if self.wants(*x) {
                    let d = scale.len();
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= scale[i % d];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Act(x, kind) => {
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (v, &xx) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *v *= kind.derivative(xx);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (n, _) = y.rows_cols();
                    let mut gx = g.clone();
                    for r in 0..n {
                        let yr = y.row(r);
                        let dot: T = yr.iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                        for (o, (&yy, &gg)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(g.row(r))) {
                            *o = yy * (gg - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm { x, gain, cache } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let n = cache.rstd.len();
                if self.wants(*gain) {
                    let mut gg = Tensor::zeros(self.value(*gain).shape());
                    for (i, &v) in g.data().iter().enumerate() {
                        gg.data_mut()[i % d] += v * cache.xhat[i];
                    }
                    accumulate(&mut grads[gain.0], gg);
                }
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let dn = T::c(d as f64);
                    for r in 0..n {
                        let xh = &cache.xhat[r * d..(r + 1) * d];
                        let gr = g.row(r);
                        let dxh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dxh = dxh.iter().copied().sum::<T>() / dn;
                        let mean_dxh_xh = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let rs = cache.rstd[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rs * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::GatherRows(x, rows) => {
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ScatterRows(x, rows) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.select_rows(rows).reshape(self.value(*x).shape()).unwrap());
                }
            }
            Op::GatherPerRow(x, cols) => {
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let (n, m) = gx.rows_cols();
                    let k = cols.len() / n;
                    for (i, &c) in cols.iter().enumerate() {
                        gx.data_mut()[(i / k) * m + c] += g.data()[i];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::NormalizeRows(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let (n, _) = xv.rows_cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..n {
                        let s: T = xv.row(r).iter().copied().sum();
                        let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                        for (o, &gg) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = (gg - dot) / s;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Cosine { a, c } => self.cosine_backward(*a, *c, g, grads),
            Op::GroupMean(x, group) => {
                if self.wants(*x) {
                    let inv = T::one() / T::c(*group as f64);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let (n, _) = gx.rows_cols();
                    for r in 0..n {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Blend { x, gamma, corr } => {
                let gm = self.value(*gamma).data()[0];
                let cv = self.value(*corr).data();
                let d = cv.len();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    gx.scale_assign(T::one() - gm);
                    accumulate(&mut grads[x.0], gx);
                }
                if self.wants(*gamma) {
                    let s: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .enumerate()
                        .map(|(i, (&gg, &xx))| gg * (cv[i % d] - xx))
                        .sum();
                    accumulate(&mut grads[gamma.0], Tensor::new(self.value(*gamma).shape().to_vec(), vec![s]).unwrap());
                }
                if self.wants(*corr) {
                    let mut gc = Tensor::zeros(self.value(*corr).shape());
                    for (i, &gg) in g.data().iter().enumerate() {
                        gc.data_mut()[i % d] += gg * gm;
                    }
                    accumulate(&mut grads[corr.0], gc);
                }
            }
            Op::Attention { qkv, geometry, probs } => {
                if self.wants(*qkv) {
                    let gq = attention_backward(self.value(*qkv), *geometry, probs, g);
                    accumulate(&mut grads[qkv.0], gq);
                }
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                if self.wants(*logits) {
                    let (n, _) = probs.rows_cols();
                    let s = g.data()[0] / T::c(n as f64);
                    let mut gl = probs.clone();
                    for (o, &t) in gl.data_mut().iter_mut().zip(target.data()) {
                        *o = (*o - t) * s;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone().reshape(self.value(*x).shape()).unwrap());
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), g.data()[0]));
                }
            }
        }
    }

    fn cosine_backward(&self, a: Var, c: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let av = self.value(a);
        let cv = self.value(c);
        let (n, d) = av.rows_cols();
        let (e, _) = cv.rows_cols();
        let eps = T::c(T::EPS);
        let norm = |r: &[T]| r.iter().map(|&v| v * v).sum::<T>().sqrt();
        let na: Vec<T> = (0..n).map(|i| norm(av.row(i))).collect();
        let nc: Vec<T> = (0..e).map(|k| norm(cv.row(k))).collect();
        let mut ga = Tensor::zeros(av.shape());
        let mut gc = Tensor::zeros(cv.shape());
        for i in 0..n {
            for k in 0..e {
                let gg = g.data()[i * e + k];
                if gg == T::zero() {
                    continue;
                }
                let ar = av.row(i);
                let cr = cv.row(k);
                let dot: T = ar.iter().zip(cr).map(|(&x, &y)| x * y).sum();
                let den = na[i] * nc[k] + eps;
                // d/da [dot/den] = c/den − dot·nc·(a/na)/den²
                let coef_a = if na[i] > T::zero() { dot * nc[k] / (na[i] * den * den) } else { T::zero() };
                let coef_c = if nc[k] > T::zero() { dot * na[i] / (nc[k] * den * den) } else { T::zero() };
                for j in 0..d {
                    ga.data_mut()[i * d + j] += gg * (cr[j] / den - coef_a * ar[j]);
                    gc.data_mut()[k * d + j] += gg * (ar[j] / den - coef_c * cr[j]);
                }
            }
        }
        if self.wants(a) {
            accumulate(&mut grads[a.0], ga);
        }
        if self.wants(c) {
            accumulate(&mut grads[c.0], gc);
        }
    }
}

fn attention_backward<T: Real>(qkv: &Tensor<T>, geo: AttentionGeometry, probs: &[T], g: &Tensor<T>) -> Tensor<T> {
    let AttentionGeometry {
        batch,
        patches,
        pixels,
        heads,
    } = geo;
    let (_, three_d) = qkv.rows_cols();
    let d = three_d / 3;
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let q = qkv.data();
    let mut gq = Tensor::zeros(qkv.shape());
    let row = |b: usize, p: usize, n: usize| (b * patches + p) * pixels + n;
    let mut da = vec![T::zero(); patches];
    for b in 0..batch {
        for n in 0..pixels {
            for h in 0..heads {
                let block = ((b * pixels + n) * heads + h) * patches * patches;
                for i in 0..patches {
                    let a = &probs[block + i * patches..block + (i + 1) * patches];
                    let go = &g.data()[row(b, i, n) * d + h * dh..][..dh];
                    for (j, daj) in da.iter_mut().enumerate() {
                        let vj = &q[row(b, j, n) * three_d + 2 * d + h * dh..][..dh];
                        *daj = go.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    }
                    let dot: T = a.iter().zip(&da).map(|(&x, &y)| x * y).sum();
                    let gdata = gq.data_mut();
                    for j in 0..patches {
                        // dV_j += a_ij · dO_i
                        let vbase = row(b, j, n) * three_d + 2 * d + h * dh;
                        for t in 0..dh {
                            gdata[vbase + t] += a[j] * go[t];
                        }
                        let ds = a[j] * (da[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let qbase = row(b, i, n) * three_d + h * dh;
                        let kbase = row(b, j, n) * three_d + d + h * dh;
                        for t in 0..dh {
                            gdata[qbase + t] += ds * q[kbase + t];
                            gdata[kbase + t] += ds * q[qbase + t];
                        }
                    }
                }
            }
        }
    }
    gq
}
