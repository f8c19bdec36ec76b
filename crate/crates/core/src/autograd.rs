//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly; values are available as
//! soon as a node is created, so the same graph doubles as the inference
//! path. [`Graph::backward`] walks the tape in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::{gelu, gelu_grad, sigmoid, softplus, Scalar};
use crate::tensor::{log_softmax, moments, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Ln(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var, T),
    L2Normalize(Var, T),
    Transpose(Var),
    HConcat(Vec<Var>),
    VConcat(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    Min(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Parameters are bound lazily from an optional store so
/// each parameter maps to exactly one leaf.
#[derive(Debug)]
pub struct Graph<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Mat<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.as_slice()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, m: Arc<Mat<T>>) -> Var {
        self.push_arc(m, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (inputs under test, saliency targets).
    pub fn variable(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was created without a parameter store");
        let v = self.push_arc(store.value_arc(id), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add_row(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a (m x n) * b (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let am = self.value(a);
        let bm = self.value(b);
        assert_eq!((1, am.cols()), bm.shape(), "mul_row shape");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (o, &s) in v.row_mut(r).iter_mut().zip(bm.as_slice()) {
                *o *= s;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `ln(sigmoid(a))`, stable for large |a|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -softplus(-x));
        let ng = self.ng(a);
        self.push(v, Op::LogSigmoid(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&log_softmax(m.row(r)));
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng)
    }

    /// Row standardization without gain or bias.
    pub fn normalize(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a).normalize_rows(eps);
        let ng = self.ng(a);
        self.push(v, Op::Normalize(a, eps), ng)
    }

    /// Rows divided by `sqrt(|row|^2 + eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a).normalize_l2_rows(eps);
        let ng = self.ng(a);
        self.push(v, Op::L2Normalize(a, eps), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn hconcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::hconcat(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::HConcat(parts.to_vec()), ng)
    }

    pub fn vconcat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vconcat(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::VConcat(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        let v = self.value(a).select_rows(&idx);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Collects the listed entries into a `1 x k` row.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let v = Mat::row_vector(entries.iter().map(|&(r, c)| m[(r, c)]).collect());
        let ng = self.ng(a);
        self.push(v, Op::Pick(a, entries.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let data = self.value(a).as_slice().to_vec();
        let v = Mat::from_vec(rows, cols, data).expect("reshape must preserve element count");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Elementwise minimum; at exact ties the gradient is split equally.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), T::min);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Min(a, b), ng)
    }

    /// Sum of several `1 x 1` nodes (or any equally shaped nodes).
    pub fn add_all(&mut self, parts: &[Var]) -> Option<Var> {
        let mut it = parts.iter().copied();
        let first = it.next()?;
        Some(it.fold(first, |acc, p| self.add(acc, p)))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        let y = &*node.value;
        let mut acc = |v: Var, d: Mat<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| -> &Mat<T> { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, col_sums(g));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::MulRow(a, b) => {
                let bm = val(*b);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    for (o, &s) in da.row_mut(r).iter_mut().zip(bm.as_slice()) {
                        *o *= s;
                    }
                }
                acc(*a, da);
                acc(*b, col_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |d, x| d * gelu_grad(x))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |d, s| d * s * (T::one() - s))),
            Op::LogSigmoid(a) => acc(*a, g.zip_map(val(*a), |d, x| d * sigmoid(-x))),
            Op::Ln(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
            Op::Exp(a) => acc(*a, g.zip_map(y, |d, e| d * e)),
            Op::Softmax(a) => {
                let mut da = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - s);
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmax(a) => {
                let mut da = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: T = gr.iter().copied().sum();
                    for ((o, &ly), &q) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = q - ly.exp() * s;
                    }
                }
                acc(*a, da);
            }
            Op::Normalize(a, eps) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows(), x.cols());
                let n = T::of(x.cols() as f64);
                for r in 0..x.rows() {
                    let (_, rstd) = moments(x.row(r), *eps);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gm = gr.iter().copied().sum::<T>() / n;
                    let gym = gr.iter().zip(yr).map(|(&q, &p)| q * p).sum::<T>() / n;
                    for ((o, &q), &p) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = rstd * (q - gm - p * gym);
                    }
                }
                acc(*a, da);
            }
            Op::L2Normalize(a, eps) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = (x.row(r).iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let yg: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &q), &p) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (q - p * yg) / n;
                    }
                }
                acc(*a, da);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::HConcat(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols();
                    acc(*p, g.slice_cols(off, c));
                    off += c;
                }
            }
            Op::VConcat(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = val(*p).rows();
                    let idx: Vec<usize> = (off..off + r).collect();
                    acc(*p, g.select_rows(&idx));
                    off += r;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    da.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows(), x.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &q) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += q;
                    }
                }
                acc(*a, da);
            }
            Op::Pick(a, entries) => {
                let x = val(*a);
                let mut da = Mat::zeros(x.rows(), x.cols());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    da[(r, c)] += g.as_slice()[k];
                }
                acc(*a, da);
            }
            Op::Reshape(a) => {
                let x = val(*a);
                acc(*a, Mat::from_vec(x.rows(), x.cols(), g.as_slice().to_vec()).expect("reshape grad"));
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let inv = T::one() / T::of(x.rows() as f64);
                let mut da = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, &q) in da.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o = q * inv;
                    }
                }
                acc(*a, da);
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Mat::filled(x.rows(), x.cols(), g.as_slice()[0]));
            }
            Op::Min(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let half = T::of(0.5);
                let mut da = Mat::zeros(am.rows(), am.cols());
                let mut db = Mat::zeros(am.rows(), am.cols());
                for k in 0..am.len() {
                    let (x, z, q) = (am.as_slice()[k], bm.as_slice()[k], g.as_slice()[k]);
                    if x < z {
                        da.as_mut_slice()[k] = q;
                    } else if z < x {
                        db.as_mut_slice()[k] = q;
                    } else {
                        da.as_mut_slice()[k] = q * half;
                        db.as_mut_slice()[k] = q * half;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
        }
    }

    /// Leaf variables bound to parameters, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&p, &v)| (p, v))
    }
}

fn col_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &q) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += q;
        }
    }
    out
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, or zeros of the given shape when none flowed.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat<T> {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }

    /// Per-parameter gradients for every parameter bound in `graph`.
    pub fn param_grads(&self, graph: &Graph<'_, T>) -> Vec<(ParamId, Mat<T>)> {
        let mut out: Vec<(ParamId, Mat<T>)> =
            graph.bound_params().filter_map(|(p, v)| self.get(v).map(|g| (p, g.clone()))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

#[cfg(test)]
pub(crate) mod fd {
    //! Central finite-difference oracle for gradient checks.
    use super::*;

    /// Compares the analytic gradient of `f` at `x0` with central differences.
    /// Returns the worst relative error, using `max(|a|, |n|, 1e-3)` as scale.
    pub fn check<F>(x0: &Mat<f64>, f: F) -> f64
    where
        F: Fn(&mut Graph<'_, f64>, Var) -> Var,
    {
        check_in(&ParamStore::new(), x0, f)
    }

    /// Same as [`check`] with parameters from `store` available to `f`.
    pub fn check_in<F>(store: &ParamStore<f64>, x0: &Mat<f64>, f: F) -> f64
    where
        F: Fn(&mut Graph<'_, f64>, Var) -> Var,
    {
        let mut g = Graph::with_params(store);
        let x = g.variable(x0.clone());
        let loss = f(&mut g, x);
        let analytic = g.backward(loss).get_or_zeros(x, x0.shape());
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_mut_slice()[k] += delta;
                let mut g = Graph::with_params(store);
                let x = g.constant(xp);
                let l = f(&mut g, x);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / scale);
        }
        worst
    }

    /// Finite-difference check of the gradient w.r.t. one stored parameter.
    pub fn check_param<F>(store: &ParamStore<f64>, id: ParamId, f: F) -> f64
    where
        F: Fn(&mut Graph<'_, f64>) -> Var,
    {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g);
        let grads = g.backward(loss);
        let shape = store.value(id).shape();
        let analytic = grads
            .param_grads(&g)
            .into_iter()
            .find(|(p, _)| *p == id)
            .map(|(_, m)| m)
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1));
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..analytic.len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id).as_mut_slice()[k] += delta;
                let mut g = Graph::with_params(&s);
                let l = f(&mut g);
                g.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / scale);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::fd::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat<f64> {
        Mat::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let x0 = rand_mat(3, 4, 1);
        let w = rand_mat(4, 2, 2);
        let b = rand_mat(1, 2, 3);
        let err = check(&x0, |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let h = g.matmul(x, wv);
            let h = g.add_row(h, bv);
            let h = g.gelu(h);
            let s = g.sigmoid(h);
            let t = g.transpose(s);
            let e = g.exp(t);
            let l = g.ln(e);
            let m = g.mean_rows(l);
            g.sum(m)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_normalize_and_concat_match_finite_differences() {
        let x0 = rand_mat(3, 5, 4);
        let gain = rand_mat(1, 5, 5);
        let target = rand_mat(3, 5, 6);
        let err = check(&x0, |g, x| {
            let n = g.normalize(x, 1e-5);
            let gv = g.constant(gain.clone());
            let n = g.mul_row(n, gv);
            let sm = g.softmax(n);
            let ls = g.log_softmax(x);
            let c = g.hconcat(&[sm, ls]);
            let r = g.slice_cols(c, 2, 5);
            let tv = g.constant(target.clone());
            let p = g.mul(r, tv);
            let l2 = g.l2_normalize(x, 1e-9);
            let v = g.vconcat(&[p, l2]);
            let s = g.slice_rows(v, 1, 4);
            let picked = g.pick(s, &[(0, 1), (2, 3), (3, 2)]);
            let gathered = g.gather_rows(x, &[2, 0, 2]);
            let gs = g.sum(gathered);
            let ps = g.sum(picked);
            let tot = g.add(ps, gs);
            let sq = g.mul(tot, tot);
            g.scale(sq, 0.5)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn min_and_log_sigmoid_match_finite_differences() {
        let x0 = Mat::from_f64(1, 4, &[0.3, -1.2, 2.0, 0.05]).unwrap();
        let other = Mat::from_f64(1, 4, &[0.1, 0.4, -0.3, 0.9]).unwrap();
        let err = check(&x0, |g, x| {
            let o = g.constant(other.clone());
            let m = g.min(x, o);
            let ls = g.log_sigmoid(x);
            let a = g.add(m, ls);
            let r = g.reshape(a, 2, 2);
            let r = g.add_scalar(r, 1.0);
            let s = g.sub(r, r);
            let s2 = g.add(s, r);
            g.sum(s2)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn parameters_bind_once_and_receive_gradients() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("w", Mat::from_f64(1, 2, &[1.0, 2.0]).unwrap());
        let mut g = Graph::with_params(&store);
        let a = g.param(p);
        let b = g.param(p);
        assert_eq!(a, b);
        let s = g.mul(a, b);
        let l = g.sum(s);
        let grads = g.backward(l);
        let pg = grads.param_grads(&g);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Mat::filled(2, 2, 1.0));
        let v = g.variable(Mat::filled(2, 2, 3.0));
        let m = g.mul(c, v);
        let l = g.sum(m);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(v).unwrap().as_slice(), &[1.0; 4]);
    }
}
