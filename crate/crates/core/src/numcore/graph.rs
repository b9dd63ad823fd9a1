//! Arena-backed computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so node ids are already a
//! topological order. Values are computed eagerly. [`Graph::grad`] builds
//! the adjoint computation out of ordinary graph nodes, which makes the
//! returned gradients themselves differentiable: a parameter updated with
//! [`Graph::inner_step`] stays connected to the original leaf and a second
//! call to `grad` yields exact higher-order derivatives.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Expand(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    PadCols(Var, usize),
    /// `param - alpha * grad`; one gradient-descent update inside an inner loop.
    InnerStep {
        param: Var,
        grad: Var,
        alpha: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            MatMul(a, b) | AddRow(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Transpose(a) | SumRows(a) | BroadcastRows(a) | Scale(a, _) | AddScalar(a, _)
            | Relu(a) | Tanh(a) | Sigmoid(a) | Log(a) | Recip(a) | Clamp(a, _, _) | Sum(a)
            | Expand(a) | SliceCols(a, _, _) | PadCols(a, _) => vec![*a],
            ConcatCols(parts) => parts.clone(),
            InnerStep { param, grad, .. } => vec![*param, *grad],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(op, value, requires_grad)
    }

    fn push_with(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_with(Op::Leaf, value, true)
    }

    /// A value the graph never differentiates with respect to.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(Op::Const, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let v = self.value(x).add_row(self.value(bias));
        self.push(Op::AddRow(x, bias), v)
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_rows();
        self.push(Op::SumRows(x), v)
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let v = self.value(x).broadcast_rows(rows);
        self.push(Op::BroadcastRows(x), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    fn expand(&mut self, scalar: Var, rows: usize, cols: usize) -> Var {
        let v = Tensor::filled(rows, cols, self.value(scalar).item());
        self.push(Op::Expand(scalar), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&tensors);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(Op::SliceCols(a, start, end), v)
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let v = self.value(a).pad_cols(start, total);
        self.push(Op::PadCols(a, start), v)
    }

    pub fn inner_step(&mut self, param: Var, grad: Var, alpha: f64) -> Var {
        let v = self
            .value(param)
            .zip_map(self.value(grad), |p, g| p - alpha * g);
        self.push(Op::InnerStep { param, grad, alpha }, v)
    }

    /// Reverse-mode gradient of the scalar `loss` with respect to each of `wrt`.
    ///
    /// The adjoints are recorded as graph nodes, so the result can be
    /// differentiated again. Inputs that `loss` does not depend on receive a
    /// zero constant of matching shape.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }

        // Only nodes on a path from some `wrt` entry to `loss` carry adjoints.
        let mut relevant = vec![false; loss.0 + 1];
        for w in wrt {
            if w.0 <= loss.0 {
                relevant[w.0] = true;
            }
        }
        for i in 0..=loss.0 {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.parents().iter().any(|p| relevant[p.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if relevant[loss.0] {
            adjoint[loss.0] = Some(self.constant(Tensor::scalar(1.0)));
        }

        for i in (0..=loss.0).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            for (parent, contribution) in self.backward_rule(&op, this, g, &relevant) {
                let updated = match adjoint[parent.0] {
                    Some(prev) => self.add(prev, contribution),
                    None => contribution,
                };
                adjoint[parent.0] = Some(updated);
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    /// Convenience wrapper returning gradient values.
    pub fn grad_values(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let vars = self.grad(loss, wrt)?;
        Ok(vars.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn backward_rule(&mut self, op: &Op, this: Var, g: Var, relevant: &[bool]) -> Vec<(Var, Var)> {
        let wanted = |v: &Var| relevant[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if wanted(&a) {
                    let bt = self.transpose(b);
                    out.push((a, self.matmul(g, bt)));
                }
                if wanted(&b) {
                    let at = self.transpose(a);
                    out.push((b, self.matmul(at, g)));
                }
            }
            Op::Transpose(a) => {
                if wanted(&a) {
                    out.push((a, self.transpose(g)));
                }
            }
            Op::AddRow(x, b) => {
                if wanted(&x) {
                    out.push((x, g));
                }
                if wanted(&b) {
                    out.push((b, self.sum_rows(g)));
                }
            }
            Op::SumRows(x) => {
                if wanted(&x) {
                    let rows = self.shape(x).0;
                    out.push((x, self.broadcast_rows(g, rows)));
                }
            }
            Op::BroadcastRows(x) => {
                if wanted(&x) {
                    out.push((x, self.sum_rows(g)));
                }
            }
            Op::Add(a, b) => {
                if wanted(&a) {
                    out.push((a, g));
                }
                if wanted(&b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wanted(&a) {
                    out.push((a, g));
                }
                if wanted(&b) {
                    out.push((b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if wanted(&a) {
                    out.push((a, self.mul(g, b)));
                }
                if wanted(&b) {
                    out.push((b, self.mul(g, a)));
                }
            }
            Op::Scale(a, f) => {
                if wanted(&a) {
                    out.push((a, self.scale(g, f)));
                }
            }
            Op::AddScalar(a, _) => {
                if wanted(&a) {
                    out.push((a, g));
                }
            }
            Op::Relu(a) => {
                if wanted(&a) {
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    out.push((a, self.mul(g, mask)));
                }
            }
            Op::Tanh(a) => {
                if wanted(&a) {
                    // 1 - y^2
                    let y2 = self.mul(this, this);
                    let neg = self.scale(y2, -1.0);
                    let d = self.add_scalar(neg, 1.0);
                    out.push((a, self.mul(g, d)));
                }
            }
            Op::Sigmoid(a) => {
                if wanted(&a) {
                    // y (1 - y)
                    let neg = self.scale(this, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let d = self.mul(this, one_minus);
                    out.push((a, self.mul(g, d)));
                }
            }
            Op::Log(a) => {
                if wanted(&a) {
                    let r = self.recip(a);
                    out.push((a, self.mul(g, r)));
                }
            }
            Op::Recip(a) => {
                if wanted(&a) {
                    let y2 = self.mul(this, this);
                    let d = self.scale(y2, -1.0);
                    out.push((a, self.mul(g, d)));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if wanted(&a) {
                    let mask = self
                        .value(a)
                        .map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                    let mask = self.constant(mask);
                    out.push((a, self.mul(g, mask)));
                }
            }
            Op::Sum(a) => {
                if wanted(&a) {
                    let (r, c) = self.shape(a);
                    out.push((a, self.expand(g, r, c)));
                }
            }
            Op::Expand(a) => {
                if wanted(&a) {
                    out.push((a, self.sum(g)));
                }
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = self.shape(p).1;
                    if wanted(&p) {
                        out.push((p, self.slice_cols(g, start, start + width)));
                    }
                    start += width;
                }
            }
            Op::SliceCols(a, start, _) => {
                if wanted(&a) {
                    let total = self.shape(a).1;
                    out.push((a, self.pad_cols(g, start, total)));
                }
            }
            Op::PadCols(a, start) => {
                if wanted(&a) {
                    let width = self.shape(a).1;
                    out.push((a, self.slice_cols(g, start, start + width)));
                }
            }
            Op::InnerStep { param, grad, alpha } => {
                if wanted(&param) {
                    out.push((param, g));
                }
                if wanted(&grad) {
                    out.push((grad, self.scale(g, -alpha)));
                }
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}
