//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the adjoint sweep.

use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gelu, Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    RepeatLeading(Var),
    Linear(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    L2Normalize(Var),
    GatherRows(Var, Vec<usize>),
    MaskedLogSumExp(Var, Vec<bool>),
    Clamp(Var, T, T),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node adjoints produced by [`Graph::gradients`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Reads a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push("mul", v, Op::Mul(a, b))
    }

    /// `x * scale + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * scale + shift);
        self.push("affine", v, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.affine(x, c, T::zero())
    }

    /// Adds `b` (shape = trailing suffix of `a`) to every leading slice of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_broadcast(self.value(b))?;
        self.push("add_broadcast", v, Op::AddBroadcast(a, b))
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul_broadcast(self.value(b))?;
        self.push("mul_broadcast", v, Op::MulBroadcast(a, b))
    }

    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x).repeat_leading(n);
        self.push("repeat_leading", v, Op::RepeatLeading(x))
    }

    /// `[.., k] × [k, n] -> [.., n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = self.value(x).linear(self.value(w))?;
        self.push("linear", v, Op::Linear(x, w))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::Linear(a, b))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).bmm(self.value(b))?;
        self.push("bmm", v, Op::Bmm(a, b))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        self.push("permute", v, Op::Permute(x, axes.to_vec()))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                left: self.shape(x).to_vec(),
                right: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).softmax_last();
        self.push("softmax", v, Op::Softmax(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sigmoid();
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).ln()?;
        self.push("log", v, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).exp();
        self.push("exp", v, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).relu();
        self.push("relu", v, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).gelu();
        self.push("gelu", v, Op::Gelu(x))
    }

    /// Affine-free layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let v = self.value(x).layer_norm(eps);
        self.push("layer_norm", v, Op::LayerNorm(x, eps))
    }

    /// Rank-0 sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        self.push("mean", v, Op::Mean(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).sum_axis(axis)?;
        self.push("sum_axis", v, Op::SumAxis(x, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        self.push("concat", v, Op::Concat(parts.to_vec(), axis))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).l2_normalize()?;
        self.push("l2_normalize", v, Op::L2Normalize(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(idx)?;
        self.push("gather_rows", v, Op::GatherRows(x, idx.to_vec()))
    }

    /// Row-wise stable log-sum-exp over masked entries of a `[r, n]` matrix.
    pub fn masked_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x).masked_logsumexp(mask)?;
        self.push("masked_logsumexp", v, Op::MaskedLogSumExp(x, mask.to_vec()))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        self.push("clamp", v, Op::Clamp(x, lo, hi))
    }

    /// Adjoints of a rank-0 output with respect to every node.
    pub fn gradients(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.rank() != 0 {
            return Err(TensorError::Contract(format!(
                "backward requires a rank-0 output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    /// Accumulates `∂output/∂param` into each parameter's gradient.
    pub fn backward(&self, output: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(output)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || Ok(g.clone()))?;
                self.acc(grads, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || Ok(g.clone()))?;
                self.acc(grads, *b, || Ok(g.scale(-T::one())))?;
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || g.mul(self.value(*b)))?;
                self.acc(grads, *b, || g.mul(self.value(*a)))?;
            }
            Op::Affine(x, c) => self.acc(grads, *x, || Ok(g.scale(*c)))?,
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, || Ok(g.clone()))?;
                self.acc(grads, *b, || Ok(fold_leading(g, self.value(*b).shape())))?;
            }
            Op::MulBroadcast(a, b) => {
                let bv = self.value(*b);
                self.acc(grads, *a, || g.mul_broadcast(bv))?;
                self.acc(grads, *b, || {
                    let prod = g.mul(self.value(*a))?;
                    Ok(fold_leading(&prod, bv.shape()))
                })?;
            }
            Op::RepeatLeading(x) => {
                self.acc(grads, *x, || Ok(fold_leading(g, self.value(*x).shape())))?;
            }
            Op::Linear(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                self.acc(grads, *x, || {
                    let mut out = vec![T::zero(); rows * k];
                    T::gemm(rows, n, k, g.data(), false, wv.data(), true, T::zero(), &mut out);
                    Tensor::new(xv.shape(), out)
                })?;
                self.acc(grads, *w, || {
                    let mut out = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, xv.data(), true, g.data(), false, T::zero(), &mut out);
                    Tensor::new(wv.shape(), out)
                })?;
            }
            Op::Bmm(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                self.acc(grads, *a, || {
                    let mut out = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..],
                            false,
                            &bv.data()[i * k * n..],
                            true,
                            T::zero(),
                            &mut out[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor::new(av.shape(), out)
                })?;
                self.acc(grads, *b, || {
                    let mut out = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..],
                            true,
                            &g.data()[i * m * n..],
                            false,
                            T::zero(),
                            &mut out[i * k * n..(i + 1) * k * n],
                        );
                    }
                    Tensor::new(bv.shape(), out)
                })?;
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.acc(grads, *x, || g.permute(&inv))?;
            }
            Op::Reshape(x) => self.acc(grads, *x, || g.reshape(self.value(*x).shape()))?,
            Op::Softmax(x) => self.acc(grads, *x, || {
                let d = y.last_dim();
                let mut out = g.clone();
                for (o, yr) in out.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot = o.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (ov, &yv) in o.iter_mut().zip(yr) {
                        *ov = yv * (*ov - dot);
                    }
                }
                Ok(out)
            })?,
            Op::Sigmoid(x) => self.acc(grads, *x, || {
                Ok(zip_map(g, y, |gv, s| gv * s * (T::one() - s)))
            })?,
            Op::Log(x) => self.acc(grads, *x, || Ok(zip_map(g, self.value(*x), |gv, xv| gv / xv)))?,
            Op::Exp(x) => self.acc(grads, *x, || Ok(zip_map(g, y, |gv, e| gv * e)))?,
            Op::Relu(x) => self.acc(grads, *x, || {
                Ok(zip_map(g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }))
            })?,
            Op::Gelu(x) => self.acc(grads, *x, || Ok(zip_map(g, self.value(*x), |gv, xv| gv * gelu(xv).1)))?,
            Op::LayerNorm(x, eps) => self.acc(grads, *x, || {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let n = T::lit(d as f64);
                let mut out = g.clone();
                for ((o, xr), yr) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(y.data().chunks(d))
                {
                    let mean = xr.iter().fold(T::zero(), |a, &b| a + b) / n;
                    let var = xr.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
                    let inv = T::one() / (var + *eps).sqrt();
                    let sg = o.iter().fold(T::zero(), |a, &b| a + b);
                    let sgy = o.iter().zip(yr).fold(T::zero(), |a, (&b, &c)| a + b * c);
                    for (ov, &yv) in o.iter_mut().zip(yr) {
                        *ov = inv / n * (n * *ov - sg - yv * sgy);
                    }
                }
                Ok(out)
            })?,
            Op::Sum(x) => self.acc(grads, *x, || Ok(Tensor::full(self.value(*x).shape(), g.item())))?,
            Op::Mean(x) => self.acc(grads, *x, || {
                let xv = self.value(*x);
                Ok(Tensor::full(xv.shape(), g.item() / T::lit(xv.numel() as f64)))
            })?,
            Op::SumAxis(x, axis) => self.acc(grads, *x, || {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        out.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                Tensor::new(xs, out)
            })?,
            Op::Concat(parts, axis) => {
                let gs = g.shape();
                let outer: usize = gs[..*axis].iter().product();
                let inner: usize = gs[*axis + 1..].iter().product();
                let total = gs[*axis];
                let mut start = 0;
                for &p in parts {
                    let ps = self.value(p).shape();
                    let len = ps[*axis];
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            out.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        Tensor::new(ps, out)
                    })?;
                    start += len;
                }
            }
            Op::L2Normalize(x) => self.acc(grads, *x, || {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut out = g.clone();
                for ((o, xr), yr) in out
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(y.data().chunks(d))
                {
                    let norm = xr.iter().fold(T::zero(), |a, &b| a + b * b).sqrt();
                    let dot = o.iter().zip(yr).fold(T::zero(), |a, (&b, &c)| a + b * c);
                    for (ov, &yv) in o.iter_mut().zip(yr) {
                        *ov = (*ov - yv * dot) / norm;
                    }
                }
                Ok(out)
            })?,
            Op::GatherRows(x, idx) => self.acc(grads, *x, || {
                let xs = self.value(*x).shape();
                let d = xs[1];
                let mut out = Tensor::zeros(xs);
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * d..(k + 1) * d];
                    for (o, &s) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                Ok(out)
            })?,
            Op::MaskedLogSumExp(x, mask) => self.acc(grads, *x, || {
                let xv = self.value(*x);
                let n = xv.shape()[1];
                let mut out = Tensor::zeros(xv.shape());
                for r in 0..xv.shape()[0] {
                    let lse = y.data()[r];
                    let gr = g.data()[r];
                    for c in 0..n {
                        let k = r * n + c;
                        if mask[k] {
                            out.data_mut()[k] = gr * (xv.data()[k] - lse).exp();
                        }
                    }
                }
                Ok(out)
            })?,
            Op::Clamp(x, lo, hi) => self.acc(grads, *x, || {
                Ok(zip_map(g, self.value(*x), |gv, xv| {
                    if xv > *lo && xv < *hi {
                        gv
                    } else {
                        T::zero()
                    }
                }))
            })?,
        }
        Ok(())
    }

    fn acc(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce() -> Result<Tensor<T>>,
    ) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let g = f()?;
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBroadcast(a, b)
        | Op::MulBroadcast(a, b)
        | Op::Linear(a, b)
        | Op::Bmm(a, b) => vec![*a, *b],
        Op::Affine(x, _)
        | Op::RepeatLeading(x)
        | Op::Permute(x, _)
        | Op::Reshape(x)
        | Op::Softmax(x)
        | Op::Sigmoid(x)
        | Op::Log(x)
        | Op::Exp(x)
        | Op::Relu(x)
        | Op::Gelu(x)
        | Op::LayerNorm(x, _)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SumAxis(x, _)
        | Op::L2Normalize(x)
        | Op::GatherRows(x, _)
        | Op::MaskedLogSumExp(x, _)
        | Op::Clamp(x, _, _) => vec![*x],
        Op::Concat(parts, _) => parts.clone(),
    }
}

/// Sums a gradient over the leading axes that a broadcast added.
fn fold_leading<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let m: usize = target.iter().product();
    let mut out = Tensor::zeros(target);
    if m == 0 {
        return out;
    }
    for chunk in g.data().chunks(m) {
        for (o, &v) in out.data_mut().iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
