//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every parameter that contributed to it.

use std::collections::HashMap;

use super::{Gradients, Matrix, ParamId, ParamSet};
use crate::scalar::Scalar;

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, probs: Vec<Matrix<T>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    SumRows(Var),
    Reshape(Var),
    LogSoftmax(Var),
    PickNll { x: Var, targets: Vec<Option<usize>> },
    BceWithLogits { x: Var, targets: Matrix<T> },
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Records a differentiable computation.
pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a trainable tensor. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single-row bias");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `a · W + b`
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(a, w);
        self.add_row(h, b)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Row-wise normalization with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let n = T::of(cols as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = input.row(i);
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut value = xhat.clone();
        for i in 0..rows {
            for ((o, &gg), &bb) in value.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *o = *o * gg + bb;
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention on pre-projected `q`, `k`, `v`.
    ///
    /// With `causal`, query row `i` sees key rows `0..=i` only; masked keys are
    /// skipped entirely rather than given a large negative score.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qm.shape();
        let lk = km.rows();
        assert_eq!(km.cols(), d, "attention key width");
        assert_eq!(vm.shape(), (lk, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "model width must split evenly across heads");
        if causal {
            assert_eq!(lq, lk, "causal attention needs square scores");
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(lq, lk);
            for i in 0..lq {
                let visible = if causal { i + 1 } else { lk };
                let qi = &qm.row(i)[off..off + dh];
                let mut max = T::neg_infinity();
                for j in 0..visible {
                    let s = super::matrix::dot(qi, &km.row(j)[off..off + dh]) * scale;
                    p[(i, j)] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut total = T::zero();
                for j in 0..visible {
                    let e = (p[(i, j)] - max).exp();
                    p[(i, j)] = e;
                    total += e;
                }
                for j in 0..visible {
                    p[(i, j)] /= total;
                }
                let o = &mut out.row_mut(i)[off..off + dh];
                for j in 0..visible {
                    let w = p[(i, j)];
                    for (oo, &vv) in o.iter_mut().zip(&vm.row(j)[off..off + dh]) {
                        *oo += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, causal, probs })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            value.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start })
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(value, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Column sums as a single row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut value = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, &v) in value.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        self.push(value, Op::SumRows(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshaped(rows, cols);
        self.push(value, Op::Reshape(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut value = m.clone();
        for i in 0..m.rows() {
            let lse = crate::scalar::log_sum_exp(m.row(i).iter().copied());
            for v in value.row_mut(i) {
                *v -= lse;
            }
        }
        self.push(value, Op::LogSoftmax(x))
    }

    /// Sum over rows of `-x[row, target]`, skipping rows whose target is `None`.
    pub fn pick_nll(&mut self, x: Var, targets: &[Option<usize>]) -> Var {
        let m = self.value(x);
        assert_eq!(m.rows(), targets.len(), "one target slot per row");
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total -= m[(i, t)];
            }
        }
        self.push(Matrix::filled(1, 1, total), Op::PickNll { x, targets: targets.to_vec() })
    }

    /// Summed binary cross-entropy between `sigmoid(x)` and 0/1 `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: Matrix<T>) -> Var {
        let m = self.value(x);
        assert_eq!(m.shape(), targets.shape(), "bce target shape");
        let mut total = T::zero();
        for (&z, &y) in m.data().iter().zip(targets.data()) {
            // max(z,0) - z*y + log(1 + exp(-|z|))
            total += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        self.push(Matrix::filled(1, 1, total), Op::BceWithLogits { x, targets })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Matrix::filled(1, 1, total), Op::Sum(x))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = Gradients::empty(self.params.len());

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *row, db);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, y, |gg, yy| gg * yy);
                    let db = zip_map(&g, x, |gg, xx| gg * xx);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Gelu(a) => {
                    let d = zip_map(&g, self.value(*a), |gg, x| gg * gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(*a), |gg, x| if x > T::zero() { gg } else { T::zero() });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |gg, s| gg * s * (T::one() - s));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |gg, t| gg * (T::one() - t * t));
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (rows, cols) = g.shape();
                    let gv = self.value(*gain).row(0);
                    let n = T::of(cols as f64);
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..cols {
                            let dxh = gr[j] * gv[j];
                            mean_d += dxh;
                            mean_dx += dxh * xr[j];
                            dgain[(0, j)] += gr[j] * xr[j];
                            dbias[(0, j)] += gr[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let is = inv_std[i];
                        for j in 0..cols {
                            let dxh = gr[j] * gv[j];
                            dx[(i, j)] = is * (dxh - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                }
                Op::Attention { q, k, v, heads, causal, probs } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (lq, d) = qm.shape();
                    let lk = km.rows();
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let mut dq = Matrix::zeros(lq, d);
                    let mut dk = Matrix::zeros(lk, d);
                    let mut dv = Matrix::zeros(lk, d);
                    let mut dp = vec![T::zero(); lk];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..lq {
                            let visible = if *causal { i + 1 } else { lk };
                            let go = &g.row(i)[off..off + dh];
                            let mut weighted = T::zero();
                            for j in 0..visible {
                                let pij = p[(i, j)];
                                let vj = &vm.row(j)[off..off + dh];
                                dp[j] = super::matrix::dot(go, vj);
                                weighted += pij * dp[j];
                                for (o, &gg) in dv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                                    *o += pij * gg;
                                }
                            }
                            for j in 0..visible {
                                let ds = p[(i, j)] * (dp[j] - weighted) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                for (o, &kk) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&km.row(j)[off..off + dh]) {
                                    *o += ds * kk;
                                }
                                for (o, &qq) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qm.row(i)[off..off + dh]) {
                                    *o += ds * qq;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let piece = Matrix::from_vec(r, c, g.data()[start * c..(start + r) * c].to_vec());
                        acc(&mut grads, p, piece);
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut piece = Matrix::zeros(r, c);
                        for i in 0..r {
                            piece.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(&mut grads, p, piece);
                        off += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let (r, c) = self.shape(*table);
                    let mut dt = Matrix::zeros(r, c);
                    for (row, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::SumRows(x) => {
                    let (r, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i).copy_from_slice(g.row(0));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut grads, *x, g.reshaped(r, c));
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for i in 0..y.rows() {
                        let total: T = g.row(i).iter().copied().sum();
                        for (o, &yy) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                            *o -= yy.exp() * total;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::PickNll { x, targets } => {
                    let up = g[(0, 0)];
                    let (r, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(r, c);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            dx[(i, t)] -= up;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::BceWithLogits { x, targets } => {
                    let up = g[(0, 0)];
                    let d = zip_map(self.value(*x), targets, |z, y| (sigmoid(z) - y) * up);
                    acc(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut grads, *x, Matrix::filled(r, c, g[(0, 0)]));
                }
            }
        }
        out
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
