//! Dense row-major tensors and the binary blob format used by checkpoints
//! and embedding dumps.
//!
//! Blob layout: 8-byte magic `PMOETNSR`, one byte dtype code, one byte rank,
//! `rank` little-endian u64 extents, then the little-endian payload.

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 8] = b"PMOETNSR";

/// Element precision of a tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. `f32` is the training precision, `f64` is
/// used for gradient and oracle verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;
    /// Denominator guard for layer norm and cosine similarity.
    const EPS: f64;

    fn c(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const EPS: f64 = 1e-6;

    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const EPS: f64 = 1e-12;

    #[inline]
    fn c(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::c(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.data.len().checked_div(cols).unwrap_or(0);
        (rows, cols)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let (_, c) = self.rows_cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with [`Error::NonFinite`] naming `what` if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::c(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Row subset of a matrix view.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let (_, c) = self.rows_cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            shape: vec![rows.len(), c],
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.rows_cols();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + self.data.len() * T::DTYPE.size());
        out.extend_from_slice(BLOB_MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.shape.len() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<usize> {
        let bytes = self.to_blob();
        w.write_all(&bytes)?;
        Ok(bytes.len())
    }

    /// Decodes one blob from the front of `bytes`, converting the payload to
    /// `T` if the stored dtype differs. Returns the tensor and bytes consumed.
    pub fn from_blob(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |reason: &str| Error::Data(format!("tensor blob: {reason}"));
        if bytes.len() < 10 || &bytes[..8] != BLOB_MAGIC {
            return Err(bad("bad magic"));
        }
        let dtype = DType::from_code(bytes[8]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = bytes[9] as usize;
        let mut pos = 10;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let end = pos + 8;
            if bytes.len() < end {
                return Err(bad("truncated header"));
            }
            shape.push(u64::from_le_bytes(bytes[pos..end].try_into().unwrap()) as usize);
            pos = end;
        }
        let numel: usize = shape.iter().product();
        let end = pos + numel * dtype.size();
        if bytes.len() < end {
            return Err(bad("truncated payload"));
        }
        let payload = &bytes[pos..end];
        let data: Vec<T> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|b| T::c(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => payload.chunks_exact(8).map(|b| T::c(f64::read_le(b))).collect(),
        };
        Ok((Self { shape, data }, end))
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Ok(Self::from_blob(&bytes)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn blob_header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_blob();
        assert_eq!(&b[..8], BLOB_MAGIC);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[18..26].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[26..30].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 26 + 8);
    }

    #[test]
    fn blob_truncated_is_error() {
        let t = Tensor::<f64>::zeros(&[3]);
        let b = t.to_blob();
        assert!(Tensor::<f64>::from_blob(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Tensor::<f64>::from_blob(&bad).is_err());
    }

    #[test]
    fn blob_converts_dtype() {
        let t = Tensor::<f32>::new(vec![2], vec![0.5, 3.0]).unwrap();
        let (u, used) = Tensor::<f64>::from_blob(&t.to_blob()).unwrap();
        assert_eq!(used, t.to_blob().len());
        assert_eq!(u.data(), &[0.5, 3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blob_round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64) * 0.37 - 100.0).collect();
                let t = Tensor::<f64>::new(shape.clone(), data).unwrap();
                let (back, used) = Tensor::<f64>::from_blob(&t.to_blob()).unwrap();
                prop_assert_eq!(used, t.to_blob().len());
                prop_assert_eq!(back, t);
            }
        }
    }
}
