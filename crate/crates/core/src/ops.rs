//! Forward kernels shared by the tape and by the non-differentiable analysis
//! paths (router initialization, affinity).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `a[m×k] · b[k×n]` on raw row-major slices, accumulated into `out[m×n]`.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`, accumulated into `out[m×n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a · bᵀ` where `a` is `[m×k]` and `b` is `[n×k]`, accumulated into `out[m×n]`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Numerically stable softmax over `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} of rank {}", x.rank())));
    }
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * extent * inner + j * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..extent {
                mx = mx.max(data[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..extent {
                let e = (data[at(j)] - mx).exp();
                data[at(j)] = e;
                sum += e;
            }
            for j in 0..extent {
                data[at(j)] /= sum;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_row_inplace<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row statistics kept by layer norm for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_fwd<T: Real>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (rows, d) = x.rows_cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("{d} channels, gain {} bias {}", gain.len(), bias.len()),
        ));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let dn = T::c(d as f64);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let o = out.row_mut(r);
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            o[j] = h * gain[j] + bias[j];
        }
    }
    Ok((out, NormCache { xhat, rstd }))
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    layer_norm_fwd(x, gain, bias, eps).map(|(y, _)| y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Gelu,
}

const GELU_K0: f64 = 0.797_884_560_802_865_4;
const GELU_K1: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let u = T::c(GELU_K0) * (x + T::c(GELU_K1) * x * x * x);
                T::c(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let k0 = T::c(GELU_K0);
                let k1 = T::c(GELU_K1);
                let u = k0 * (x + k1 * x * x * x);
                let t = u.tanh();
                let du = k0 * (T::one() + T::c(3.0) * k1 * x * x);
                T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
            }
        }
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Per-channel min/max scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScalerParams {
    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// Channels whose observed span is zero.
    pub fn degenerate(&self) -> Vec<bool> {
        self.min.iter().zip(&self.max).map(|(lo, hi)| hi <= lo).collect()
    }

    /// `(scale, shift)` such that `apply(x) = x * scale + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(&lo, &hi)| {
                if hi > lo {
                    let s = 1.0 / (hi - lo);
                    (s, -lo * s)
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip()
    }
}

pub fn minmax_fit<T: Real>(samples: &Tensor<T>) -> Result<ScalerParams> {
    let (n, d) = samples.rows_cols();
    if n == 0 {
        return Err(Error::Empty("minmax_fit needs at least one sample".into()));
    }
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for r in 0..n {
        for (j, v) in samples.row(r).iter().enumerate() {
            let v = v.as_f64();
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(ScalerParams { min, max })
}

fn check_channels<T: Real>(op: &'static str, params: &ScalerParams, x: &Tensor<T>) -> Result<()> {
    let (_, d) = x.rows_cols();
    if d != params.channels() {
        return Err(Error::shape(
            op,
            format!("scaler has {} channels, input has {d}", params.channels()),
        ));
    }
    Ok(())
}

/// `(x − min)/(max − min)` per channel; degenerate channels map to 0.
pub fn minmax_apply<T: Real>(params: &ScalerParams, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_channels("minmax_apply", params, x)?;
    let (scale, shift) = params.affine();
    let d = scale.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % d;
        *v = T::c(v.as_f64() * scale[j] + shift[j]);
    }
    Ok(out)
}

/// Inverse of [`minmax_apply`]; degenerate channels pass through unchanged.
pub fn minmax_invert<T: Real>(params: &ScalerParams, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_channels("minmax_invert", params, y)?;
    let d = params.channels();
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let j = i % d;
        let (lo, hi) = (params.min[j], params.max[j]);
        if hi > lo {
            *v = T::c(v.as_f64() * (hi - lo) + lo);
        }
    }
    Ok(out)
}

/// `a·b / (‖a‖‖b‖ + eps)`; zero vectors give 0.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> T {
    let eps = T::c(T::EPS);
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    dot / (na * nb + eps)
}

/// Cosine similarity of every row of `a[n×d]` against every row of `c[e×d]`.
pub fn cosine_matrix<T: Real>(a: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = a.rows_cols();
    let (e, dc) = c.rows_cols();
    if d != dc {
        return Err(Error::shape("cosine_matrix", format!("{d} vs {dc} channels")));
    }
    let mut out = Tensor::zeros(&[n, e]);
    for i in 0..n {
        for k in 0..e {
            out.data_mut()[i * e + k] = cosine_similarity(a.row(i), c.row(k));
        }
    }
    Ok(out)
}
