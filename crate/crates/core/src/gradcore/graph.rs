//! Tape-style reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! the backward sweep is a reverse scan.

use crate::error::{Error, Result};
use crate::gradcore::matrix::{gemm, Matrix};
use crate::gradcore::params::ParamSet;

/// Probability clamp applied before every logarithm.
pub const LOG_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Square,
}

impl ElemOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Sub | ElemOp::Mul)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Binary(ElemOp, Var, Var),
    Unary(ElemOp, Var),
    Scale(Var, f64),
    HConcat(Var, Var),
    SumSquares(Var),
    Sum(Var),
    Bce {
        pred: Var,
        target: Matrix,
        weight: Matrix,
        total_weight: f64,
    },
    SoftmaxCe {
        logits: Var,
        probs: Matrix,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A dynamically recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
}

/// Gradients from one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to parameter `id` of a [`ParamSet`]. The same parameter may
    /// be bound several times; [`Graph::param_grads`] sums the bindings.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        let v = self.push(value.clone(), Op::Param, true);
        self.params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x · w + b` with `b` a single row broadcast over the rows of `x·w`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = xv.matmul(wv)?;
        if bv.rows() != 1 || bv.cols() != out.cols() {
            return Err(dim_err("linear bias", &out, bv));
        }
        let bias = bv.as_slice();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear(x, w, b), ng))
    }

    /// Elementwise operator; binary operators take `b`, unary ones ignore it.
    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        if op.is_binary() {
            let b = b.ok_or_else(|| Error::Contract(format!("{op:?} needs two operands")))?;
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(dim_err("elementwise", av, bv));
            }
            let out = match op {
                ElemOp::Add => av.zip_map_unchecked(bv, |x, y| x + y),
                ElemOp::Sub => av.zip_map_unchecked(bv, |x, y| x - y),
                _ => av.zip_map_unchecked(bv, |x, y| x * y),
            };
            let ng = self.ng(a) || self.ng(b);
            Ok(self.push(out, Op::Binary(op, a, b), ng))
        } else {
            let av = self.value(a);
            let out = match op {
                ElemOp::Sigmoid => av.map(sigmoid),
                ElemOp::Tanh => av.map(f64::tanh),
                ElemOp::Relu => av.map(|x| x.max(0.0)),
                _ => av.map(|x| x * x),
            };
            let ng = self.ng(a);
            Ok(self.push(out, Op::Unary(op, a), ng))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElemOp::Mul, a, Some(b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(ElemOp::Sigmoid, a, None).expect("unary op")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(ElemOp::Tanh, a, None).expect("unary op")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(ElemOp::Relu, a, None).expect("unary op")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.elementwise(ElemOp::Square, a, None).expect("unary op")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hconcat(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::HConcat(a, b), ng))
    }

    /// Scalar `Σ a²`.
    pub fn reduce_sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let ng = self.ng(a);
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a), ng)
    }

    /// Scalar `Σ a`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), ng)
    }

    /// Weighted binary cross-entropy, averaged over the total weight.
    /// Predictions are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]`; a zero
    /// total weight yields a loss of exactly 0.
    pub fn bce_loss(&mut self, pred: Var, target: &Matrix, weight: &Matrix) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(dim_err("bce target", pv, target));
        }
        if pv.shape() != weight.shape() {
            return Err(dim_err("bce weight", pv, weight));
        }
        let total_weight = weight.sum();
        let mut loss = 0.0;
        if total_weight > 0.0 {
            for ((&p, &t), &w) in pv
                .as_slice()
                .iter()
                .zip(target.as_slice())
                .zip(weight.as_slice())
            {
                if w != 0.0 {
                    let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                    loss -= w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                }
            }
            loss /= total_weight;
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::Bce {
                pred,
                target: target.clone(),
                weight: weight.clone(),
                total_weight,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (n × C) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: lv.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= lv.cols()) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += z.ln() - (row[y] - max);
        }
        let n = labels.len().max(1) as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss / n),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every call starts from zeroed
    /// gradients, so repeated calls on one graph agree exactly.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        accum_gemm(&mut grads, *a, av.shape(), &g, false, bv, true);
                    }
                    if self.ng(*b) {
                        accum_gemm(&mut grads, *b, bv.shape(), av, true, &g, false);
                    }
                }
                Op::Linear(x, w, b) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.ng(*x) {
                        accum_gemm(&mut grads, *x, xv.shape(), &g, false, wv, true);
                    }
                    if self.ng(*w) {
                        accum_gemm(&mut grads, *w, wv.shape(), xv, true, &g, false);
                    }
                    if self.ng(*b) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accum(&mut grads, *b, db);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    match op {
                        ElemOp::Add => {
                            if self.ng(a) {
                                accum(&mut grads, a, g.clone());
                            }
                            if self.ng(b) {
                                accum(&mut grads, b, g.clone());
                            }
                        }
                        ElemOp::Sub => {
                            if self.ng(a) {
                                accum(&mut grads, a, g.clone());
                            }
                            if self.ng(b) {
                                accum(&mut grads, b, g.scale(-1.0));
                            }
                        }
                        _ => {
                            if self.ng(a) {
                                let d = g.zip_map_unchecked(self.value(b), |x, y| x * y);
                                accum(&mut grads, a, d);
                            }
                            if self.ng(b) {
                                let d = g.zip_map_unchecked(self.value(a), |x, y| x * y);
                                accum(&mut grads, b, d);
                            }
                        }
                    }
                }
                Op::Unary(op, a) => {
                    let a = *a;
                    if self.ng(a) {
                        let d = match op {
                            ElemOp::Sigmoid => g.zip_map_unchecked(&node.value, |g, y| g * y * (1.0 - y)),
                            ElemOp::Tanh => g.zip_map_unchecked(&node.value, |g, y| g * (1.0 - y * y)),
                            ElemOp::Relu => {
                                g.zip_map_unchecked(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 })
                            }
                            _ => g.zip_map_unchecked(self.value(a), |g, x| 2.0 * x * g),
                        };
                        accum(&mut grads, a, d);
                    }
                }
                Op::Scale(a, s) => {
                    if self.ng(*a) {
                        accum(&mut grads, *a, g.scale(*s));
                    }
                }
                Op::HConcat(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    if self.ng(*a) {
                        let d = Matrix::from_fn(g.rows(), ac, |i, j| g.get(i, j));
                        accum(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = Matrix::from_fn(g.rows(), bc, |i, j| g.get(i, ac + j));
                        accum(&mut grads, *b, d);
                    }
                }
                Op::SumSquares(a) => {
                    if self.ng(*a) {
                        let s = 2.0 * g.get(0, 0);
                        accum(&mut grads, *a, self.value(*a).scale(s));
                    }
                }
                Op::Sum(a) => {
                    if self.ng(*a) {
                        let av = self.value(*a);
                        accum(&mut grads, *a, Matrix::filled(av.rows(), av.cols(), g.get(0, 0)));
                    }
                }
                Op::Bce {
                    pred,
                    target,
                    weight,
                    total_weight,
                } => {
                    if self.ng(*pred) && *total_weight > 0.0 {
                        let pv = self.value(*pred);
                        let upstream = g.get(0, 0) / total_weight;
                        let mut d = Matrix::zeros(pv.rows(), pv.cols());
                        for (((dv, &p), &t), &w) in d
                            .as_mut_slice()
                            .iter_mut()
                            .zip(pv.as_slice())
                            .zip(target.as_slice())
                            .zip(weight.as_slice())
                        {
                            if w != 0.0 {
                                let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                                *dv = upstream * w * (-t / p + (1.0 - t) / (1.0 - p));
                            }
                        }
                        accum(&mut grads, *pred, d);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    labels,
                } => {
                    if self.ng(*logits) {
                        let n = labels.len().max(1) as f64;
                        let upstream = g.get(0, 0) / n;
                        let mut d = probs.clone();
                        for (i, &y) in labels.iter().enumerate() {
                            let row = d.row_mut(i);
                            row[y] -= 1.0;
                            for v in row.iter_mut() {
                                *v *= upstream;
                            }
                        }
                        accum(&mut grads, *logits, d);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Per-parameter gradients, summed over every binding of each parameter.
    /// Parameters not reached by the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        for &(v, id) in &self.params {
            if let (Some(g), Some(slot)) = (grads.get(v), out.get_mut(id)) {
                for (s, x) in slot.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *s += x;
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn accum_gemm(
    grads: &mut [Option<Matrix>],
    v: Var,
    shape: (usize, usize),
    a: &Matrix,
    ta: bool,
    b: &Matrix,
    tb: bool,
) {
    match &mut grads[v.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}
