//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is pushed, and [`Graph::backward`] walks the tape in reverse once.
//! Binary element-wise operations broadcast any operand dimension of size 1.

use std::collections::HashMap;

use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { a: Var, scale: S },
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Clamp { a: Var, lo: S, hi: S },
    LayerNorm { a: Var, inv_std: Vec<S> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { a: Var, index: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
}

/// Gradients of one scalar output with respect to every node of a graph.
pub struct Grads<S> {
    per_node: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<S>> {
        self.per_node[v.0].as_ref()
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bget<S: Scalar>(m: &Matrix<S>, r: usize, c: usize) -> S {
    let rr = if m.rows() == 1 { 0 } else { r };
    let cc = if m.cols() == 1 { 0 } else { c };
    m[(rr, cc)]
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64_lossy(0.044715);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x);
    (y, dy)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self, v: Var) -> S {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "item() on non-scalar node");
        m[(0, 0)]
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = self.value(a).matmul_t(ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Matrix<S> {
        let (ma, mb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(ma.shape(), mb.shape());
        if ma.shape() == mb.shape() {
            let data = ma
                .as_slice()
                .iter()
                .zip(mb.as_slice())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Matrix::from_vec(r, c, data);
        }
        Matrix::from_fn(r, c, |i, j| f(bget(ma, i, j), bget(mb, i, j)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_broadcast(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_broadcast(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_broadcast(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        self.affine(a, k, S::zero())
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| S::one() / (S::one() + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(S::ln);
        self.push(value, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(S::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(S::abs);
        self.push(value, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp { a, lo, hi })
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Var {
        let x = self.value(a);
        let n = S::from_usize(x.cols()).unwrap();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { a, inv_std })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let value = Matrix::from_fn(x.rows(), len, |r, c| x[(r, start + c)]);
        self.push(value, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows());
        let idx: Vec<usize> = (start..start + len).collect();
        let value = x.rows_subset(&idx);
        self.push(value, Op::SliceRows { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).rows_subset(index);
        self.push(
            value,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
        )
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = S::from_usize(x.rows()).unwrap();
        let value = Matrix::from_fn(1, x.cols(), |_, c| {
            (0..x.rows()).map(|r| x[(r, c)]).sum::<S>() / n
        });
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar node");
        let mut grads: Vec<Option<Matrix<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                &Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let da = if ta {
                        vb.matmul_t(tb, &g, true)
                    } else {
                        g.matmul_t(false, vb, !tb)
                    };
                    let db = if tb {
                        g.matmul_t(true, va, ta)
                    } else {
                        va.matmul_t(!ta, &g, false)
                    };
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                &Op::Add(a, b) => {
                    accumulate(&mut grads, a, reduce_any(&g, self.shape(a)));
                    accumulate(&mut grads, b, reduce_any(&g, self.shape(b)));
                }
                &Op::Sub(a, b) => {
                    accumulate(&mut grads, a, reduce_any(&g, self.shape(a)));
                    let neg = g.map(|x| -x);
                    accumulate(&mut grads, b, reduce_any(&neg, self.shape(b)));
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * bget(vb, r, c));
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] * bget(va, r, c));
                    accumulate(&mut grads, a, reduce_any(&ga, va.shape()));
                    accumulate(&mut grads, b, reduce_any(&gb, vb.shape()));
                }
                &Op::Affine { a, scale } => {
                    accumulate(&mut grads, a, g.map(|x| x * scale));
                }
                &Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: S = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                        for c in 0..y.cols() {
                            da[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut grads, a, da);
                }
                &Op::Gelu(a) => {
                    let x = self.value(a);
                    accumulate(&mut grads, a, zip_map(&g, x, |d, v| d * gelu_parts(v).1));
                }
                &Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, a, zip_map(&g, y, |d, s| d * s * (S::one() - s)));
                }
                &Op::Log(a) => {
                    accumulate(&mut grads, a, zip_map(&g, self.value(a), |d, x| d / x));
                }
                &Op::Exp(a) => {
                    accumulate(&mut grads, a, zip_map(&g, &node.value, |d, y| d * y));
                }
                &Op::Abs(a) => {
                    accumulate(
                        &mut grads,
                        a,
                        zip_map(&g, self.value(a), |d, x| {
                            if x > S::zero() {
                                d
                            } else if x < S::zero() {
                                -d
                            } else {
                                S::zero()
                            }
                        }),
                    );
                }
                &Op::Clamp { a, lo, hi } => {
                    accumulate(
                        &mut grads,
                        a,
                        zip_map(&g, self.value(a), |d, x| {
                            if x >= lo && x <= hi {
                                d
                            } else {
                                S::zero()
                            }
                        }),
                    );
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = &node.value;
                    let n = S::from_usize(y.cols()).unwrap();
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let sum_g: S = gr.iter().copied().sum();
                        let sum_gy: S = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for c in 0..y.cols() {
                            da[(r, c)] = inv_std[r] * (gr[c] - sum_g / n - yr[c] * sum_gy / n);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                &Op::SliceCols { a, start } => {
                    let (rows, cols) = self.shape(a);
                    let mut da = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        da.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, da);
                }
                &Op::SliceRows { a, start } => {
                    let (rows, cols) = self.shape(a);
                    let mut da = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let dp = Matrix::from_fn(rows, cols, |r, c| g[(r, off + c)]);
                        off += cols;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let dp = Matrix::from_fn(rows, cols, |r, c| g[(off + r, c)]);
                        off += rows;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::GatherRows { a, index } => {
                    let (rows, cols) = self.shape(*a);
                    let mut da = Matrix::zeros(rows, cols);
                    for (r, &src) in index.iter().enumerate() {
                        for (d, &v) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                &Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(a);
                    let k = S::one() / S::from_usize(rows).unwrap();
                    let da = Matrix::from_fn(rows, cols, |_, c| g[(0, c)] * k);
                    accumulate(&mut grads, a, da);
                }
                &Op::SumAll(a) => {
                    let (rows, cols) = self.shape(a);
                    accumulate(&mut grads, a, Matrix::filled(rows, cols, g[(0, 0)]));
                }
                &Op::Transpose(a) => {
                    accumulate(&mut grads, a, g.transpose());
                }
            }
            grads[i] = Some(g);
        }
        Grads { per_node: grads }
    }

    /// Adds the gradient of every parameter node into `buffer`, scaled by `weight`.
    pub fn accumulate_param_grads(&self, grads: &Grads<S>, weight: S, buffer: &mut GradBuffer<S>) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                if weight == S::one() {
                    buffer.accumulate(id, g);
                } else {
                    buffer.accumulate(id, &g.map(|x| x * weight));
                }
            }
        }
    }
}

fn reduce_any<S: Scalar>(grad: &Matrix<S>, shape: (usize, usize)) -> Matrix<S> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            out[(rr, cc)] += grad[(r, c)];
        }
    }
    out
}

fn zip_map<S: Scalar>(g: &Matrix<S>, x: &Matrix<S>, f: impl Fn(S, S) -> S) -> Matrix<S> {
    let data = g
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(&d, &v)| f(d, v))
        .collect();
    Matrix::from_vec(g.rows(), g.cols(), data)
}

fn accumulate<S: Scalar>(grads: &mut [Option<Matrix<S>>], v: Var, delta: Matrix<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
