//! Dense row-major tensors and the forward kernels of every primitive.
//!
//! Kernels here are plain functions over values; [`crate::graph::Graph`]
//! records them and supplies the matching backward rules.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn shape_err<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err("new", shape, &[data.len()]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis (1 for rank 0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of trailing-axis vectors.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.numel() / last
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()).expect("finite cast"))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, &self.shape, &other.shape);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err("add_assign", &self.shape, &other.shape);
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn check_suffix(&self, other: &Self, op: &'static str) -> Result<()> {
        let k = other.rank();
        if k > self.rank() || self.shape[self.rank() - k..] != other.shape[..] {
            return shape_err(op, &self.shape, &other.shape);
        }
        Ok(())
    }

    /// Adds `other`, whose shape is a trailing suffix of `self`'s, to every
    /// leading slice.
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        self.check_suffix(other, "add_broadcast")?;
        let m = other.numel().max(1);
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| a + other.data[i % m])
                .collect(),
        })
    }

    pub fn mul_broadcast(&self, other: &Self) -> Result<Self> {
        self.check_suffix(other, "mul_broadcast")?;
        let m = other.numel().max(1);
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| a * other.data[i % m])
                .collect(),
        })
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat_leading(&self, n: usize) -> Self {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        let mut data = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self { shape, data }
    }

    /// `[.., k] × [k, n] -> [.., n]`; leading axes are flattened into rows.
    pub fn linear(&self, weight: &Self) -> Result<Self> {
        if weight.rank() != 2 || self.rank() == 0 || self.last_dim() != weight.shape[0] {
            return shape_err("linear", &self.shape, &weight.shape);
        }
        let (rows, k, n) = (self.rows(), weight.shape[0], weight.shape[1]);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, &self.data, false, &weight.data, false, T::zero(), &mut out);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Self { shape, data: out })
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return shape_err("matmul", &self.shape, &other.shape);
        }
        self.linear(other)
    }

    /// Batched product `[b, m, k] × [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        if self.rank() != 3
            || other.rank() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1]
        {
            return shape_err("bmm", &self.shape, &other.shape);
        }
        let (b, m, k, n) = (self.shape[0], self.shape[1], self.shape[2], other.shape[2]);
        let mut out = vec![T::zero(); b * m * n];
        for i in 0..b {
            T::gemm(
                m,
                k,
                n,
                &self.data[i * m * k..(i + 1) * m * k],
                false,
                &other.data[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(Self {
            shape: vec![b, m, n],
            data: out,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", &self.shape, axes);
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides_of(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return shape_err("transpose", &self.shape, &[]);
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Row-wise softmax over the trailing axis, max-subtracted.
    pub fn softmax_last(&self) -> Self {
        let d = self.last_dim();
        let mut data = self.data.clone();
        for row in data.chunks_mut(d.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn ln(&self) -> Result<Self> {
        if let Some(x) = self.data.iter().find(|&&x| !(x > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        Ok(self.map(|x| x.ln()))
    }

    pub fn exp(&self) -> Self {
        self.map(|x| x.exp())
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn gelu(&self) -> Self {
        self.map(|x| gelu(x).0)
    }

    /// Normalizes each trailing-axis vector to zero mean and unit variance
    /// (biased variance, `eps` inside the square root).
    pub fn layer_norm(&self, eps: T) -> Self {
        let d = self.last_dim();
        let n = T::lit(d as f64);
        let mut data = self.data.clone();
        for row in data.chunks_mut(d.max(1)) {
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Left-to-right sum of every element.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return shape_err("sum_axis", &self.shape, &[axis]);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        if axis >= first.rank() {
            return shape_err("concat", &first.shape, &[axis]);
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err("concat", &first.shape, &p.shape);
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Divides every trailing-axis vector by its Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Self> {
        let d = self.last_dim();
        let mut data = self.data.clone();
        for (r, row) in data.chunks_mut(d.max(1)).enumerate() {
            let norm = row.iter().fold(T::zero(), |a, &b| a + b * b).sqrt();
            if !(norm > T::zero()) {
                return Err(TensorError::Domain {
                    op: "l2_normalize",
                    detail: format!("vector {r} has zero norm"),
                });
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Selects rows of a `[r, d]` matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("gather_rows", &self.shape, &[]);
        }
        let (r, d) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return shape_err("gather_rows", &self.shape, &[i]);
            }
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Ok(Self {
            shape: vec![idx.len(), d],
            data,
        })
    }

    /// Row-wise log-sum-exp over the entries of `[r, n]` whose mask is set.
    /// Rows with no selected entry yield 0.
    pub fn masked_logsumexp(&self, mask: &[bool]) -> Result<Self> {
        if self.rank() != 2 || mask.len() != self.numel() {
            return shape_err("masked_logsumexp", &self.shape, &[mask.len()]);
        }
        let n = self.shape[1];
        let mut out = Vec::with_capacity(self.shape[0]);
        for (row, m) in self.data.chunks(n.max(1)).zip(mask.chunks(n.max(1))) {
            out.push(masked_lse_row(row, m));
        }
        Ok(Self {
            shape: vec![self.shape[0]],
            data: out,
        })
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn masked_lse_row<T: Scalar>(row: &[T], mask: &[bool]) -> T {
    let m = row
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .fold(T::neg_infinity(), |a, (&b, _)| a.max(b));
    if m == T::neg_infinity() {
        return T::zero();
    }
    let s = row
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .fold(T::zero(), |a, (&b, _)| a + (b - m).exp());
    m + s.ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
pub(crate) fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let t = T64::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(t.softmax_last().data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn l2_normalize_three_four() {
        let t = T64::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let n = t.l2_normalize().unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_zero_vector() {
        let t = T64::zeros(&[2, 3]);
        assert!(matches!(t.l2_normalize(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let t = T64::from_f64(&[2], &[1.0, 0.0]).unwrap();
        assert!(matches!(t.ln(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = T64::zeros(&[2, 3]);
        let b = T64::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn new_checks_element_count() {
        assert!(T64::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn permute_round_trips() {
        let t = T64::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element (a,b,c) of t lands at (c,a,b)
        assert_eq!(p.data()[3 * 6 + 1 * 3 + 2], t.data()[1 * 12 + 2 * 4 + 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn sum_axis_and_concat() {
        let t = T64::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.sum_axis(0).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(t.sum_axis(1).unwrap().data(), &[3.0, 12.0]);
        let c = Tensor::concat(&[&t, &t], 1).unwrap();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(c.row(1), &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let t = T64::from_fn(&[3, 5], |i| (i as f64).sin() * 3.0);
        let n = t.layer_norm(1e-5);
        for r in 0..3 {
            let m: f64 = n.row(r).iter().sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn masked_lse_ignores_masked_entries() {
        let t = T64::from_f64(&[2, 3], &[0.0, 100.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let mask = [true, false, true, false, false, false];
        let out = t.masked_logsumexp(&mask).unwrap();
        assert!((out.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
    }
}
