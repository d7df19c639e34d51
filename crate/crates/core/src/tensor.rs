//! Dense row-major tensors and the deterministic kernels behind them.
//!
//! Every reduction in this module runs left-to-right over its index, so a
//! given input always produces the same bits regardless of build or thread
//! count.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    /// Numeric code used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 1,
            DType::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F64),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

/// Floating point element type. Implemented for `f64` (the default) and `f32`.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    /// Tolerance used when comparing analytic and numeric derivatives.
    const GRAD_TOLERANCE: f64;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one element from exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const GRAD_TOLERANCE: f64 = 1e-4;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(bytes);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const GRAD_TOLERANCE: f64 = 1e-2;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(bytes);
        f32::from_le_bytes(buf)
    }
}

/// A dense tensor stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, elementwise. Shapes must agree in element count.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn same_shape(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
    }
}

/// Matrix product `A · B`, summing left to right over the inner index.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![S::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (rows, cols) = x.dims2()?;
    let mut out = x.data().to_vec();
    for r in 0..rows {
        softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows, cols], out)
}

/// Normalizes `x` to zero mean and unit variance (1/n variance), then applies
/// `gain` and `bias`.
pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], epsilon: S) -> Result<Vec<S>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths differ: x={}, gain={}, bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if epsilon <= S::zero() {
        return Err(Error::Contract(
            "layer_norm epsilon must be positive".into(),
        ));
    }
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    layer_norm_row(x, gain, bias, epsilon, &mut xhat, &mut out);
    Ok(out)
}

// ── kernels ─────────────────────────────────────────────────────────────

/// `c[m×n] = a[m×k] · b[k×n]`. Each output element accumulates its products
/// in increasing inner index, starting from zero.
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(S::zero());
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`, accumulating over rows of `a`
/// in increasing order.
pub(crate) fn gemm_tn_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], g: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += aip * gv;
            }
        }
    }
}

/// `c[m×k] = g[m×n] · bᵀ` for `b[k×n]`.
pub(crate) fn gemm_nt<S: Scalar>(m: usize, n: usize, k: usize, g: &[S], b: &[S], c: &mut [S]) {
    let bt = transpose(k, n, b);
    gemm_nn(m, n, k, g, &bt, c);
}

pub(crate) fn transpose<S: Scalar>(rows: usize, cols: usize, x: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Writes `log softmax(row)` into `out`.
pub(crate) fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for &v in row {
        total += (v - max).exp();
    }
    let log_z = max + total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - log_z;
    }
}

/// Layer norm of one row; returns `1/σ` and leaves the normalized input in
/// `xhat`.
pub(crate) fn layer_norm_row<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    epsilon: S,
    xhat: &mut [S],
    out: &mut [S],
) -> S {
    let n = S::of(x.len() as f64);
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = S::one() / (var + epsilon).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    inv_std
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + S::of(3.0) * a * x * x)
}
