//! Dense row-major `f64` tensors and the handful of kernels the network
//! blocks are built from.

use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::faults::{self, Fault};
use crate::macs::{self, Kind};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return shape_err(format!("dims must be non-empty and positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!("dims {dims:?} need {n} values, got {}", data.len()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "bad dims {dims:?}");
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().enumerate().for_each({
            let mut f = f;
            move |(i, v)| *v = f(i)
        });
        t
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    /// Number of trailing-axis vectors.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return shape_err(format!("elementwise op on {:?} and {:?}", self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("elementwise op on {:?} and {:?}", self.dims, other.dims));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Views the tensor as a matrix of `rows() x last_dim()`.
    pub fn as_matrix(&self) -> Tensor {
        Tensor { dims: vec![self.rows(), self.last_dim()], data: self.data.clone() }
    }

    pub(crate) fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [m, n] => Ok((*m, *n)),
            d => shape_err(format!("expected a matrix, got dims {d:?}")),
        }
    }
}

/// Standard matrix product of `a (m x k)` and `b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `out (m x n) = a (m x k) . b (k x n)`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    macs::add(Kind::Projection, (m * k * n) as u64);
    exec::for_each_chunk(out, n, |i, orow| {
        orow.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// `out (m x n) = a (m x k) . b^T` with `b` stored as `n x k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    macs::add(Kind::Projection, (m * k * n) as u64);
    exec::for_each_chunk(out, n, |i, orow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out (k x n) += a^T . b` with `a` stored as `m x k` and `b` as `m x n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax over one slice, in place.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    if faults::is_active(Fault::SkipSoftmaxNormalization) {
        return;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}

/// Given `p = softmax(z)` and `dp = dL/dp`, writes `dL/dz` into `dz`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner = dot(p, dp);
    for ((z, &pi), &gi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (gi - inner);
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let dims = x.dims();
    if axis >= dims.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {dims:?}")));
    }
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (a, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + a * inner];
            }
            softmax_in_place(&mut buf);
            for (a, b) in buf.iter().enumerate() {
                out.data[base + a * inner] = *b;
            }
        }
    }
    Ok(out)
}
