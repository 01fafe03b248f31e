//! A minimal reverse-mode tape over the primitive set used by the models and
//! losses in this crate.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every node after all of its consumers.

use std::collections::BTreeMap;

use super::tensor::{Tensor, LOG_FLOOR};
use super::GradientRecord;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBroadcast(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.grad_flag(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.grad_flag(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMulNt(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_bias(self.value(bias))?;
        Ok(self.binary(x, bias, v, Op::AddBias(x, bias)))
    }

    /// `x · w + b`, the affine layer used throughout the model.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).scale(factor);
        self.unary(x, v, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).add_scalar(c);
        self.unary(x, v, Op::AddScalar(x))
    }

    /// `x + s` where `s` is a one-element node broadcast over `x`.
    pub fn add_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item().map_err(|_| {
            Error::shape(
                "add_broadcast",
                &[self.value(x).shape(), self.value(s).shape()],
            )
        })?;
        let v = self.value(x).add_scalar(c);
        Ok(self.binary(x, s, v, Op::AddBroadcast(x, s)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).relu();
        self.unary(x, v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).exp();
        self.unary(x, v, Op::Exp(x))
    }

    /// Natural log, clamped below at [`LOG_FLOOR`]; clamped entries get zero gradient.
    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).ln_clamped();
        self.unary(x, v, Op::Log(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).softmax_rows();
        self.unary(x, v, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).log_softmax_rows();
        self.unary(x, v, Op::LogSoftmaxRows(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).l2_normalize_rows()?;
        Ok(self.unary(x, v, Op::L2NormalizeRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.unary(x, v, Op::Mean(x))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).sum_rows();
        self.unary(x, v, Op::SumRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let rg = self.grad_flag(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(indices)?;
        Ok(self.unary(x, v, Op::GatherRows(x, indices.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters off the computation path get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradientRecord> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let g = grads
                .get(var.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*var).shape()));
            out.insert(name.clone(), g);
        }
        Ok(GradientRecord(out))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.value(*b))?)?;
                acc(*b, self.value(*a).matmul_tn(g)?)?;
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(self.value(*b))?)?;
                acc(*b, g.matmul_tn(self.value(*a))?)?;
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone())?;
                let cols = self.value(*b).len();
                let mut gb = vec![0.0; cols];
                for row in g.rows() {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*b, Tensor::vector(gb))?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?)?;
                acc(*b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c))?,
            Op::AddScalar(x) => acc(*x, g.clone())?,
            Op::AddBroadcast(x, s) => {
                acc(*x, g.clone())?;
                let shape = self.value(*s).shape().to_vec();
                acc(*s, Tensor::full(&shape, g.sum()))?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (d, &xi) in d.data_mut().iter_mut().zip(xv.data()) {
                    if xi <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, d)?;
            }
            Op::Exp(x) => acc(*x, g.mul(y)?)?,
            Op::Log(x) => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (d, &xi) in d.data_mut().iter_mut().zip(xv.data()) {
                    *d = if xi > LOG_FLOOR { *d / xi } else { 0.0 };
                }
                acc(*x, d)?;
            }
            Op::SoftmaxRows(x) => {
                let (_, cols) = y.row_view();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(y.rows()) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                acc(*x, d)?;
            }
            Op::LogSoftmaxRows(x) => {
                let (_, cols) = y.row_view();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(y.rows()) {
                    let total: f64 = drow.iter().sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv -= yv.exp() * total;
                    }
                }
                acc(*x, d)?;
            }
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let (_, cols) = y.row_view();
                let mut d = g.clone();
                for ((drow, yrow), xrow) in
                    d.data_mut().chunks_mut(cols).zip(y.rows()).zip(xv.rows())
                {
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = (*dv - yv * dot) / norm;
                    }
                }
                acc(*x, d)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::full(&shape, g.item()?))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = xv.len().max(1) as f64;
                acc(*x, Tensor::full(xv.shape(), g.item()? / n))?;
            }
            Op::SumRows(x) => {
                let xv = self.value(*x);
                let (_, cols) = xv.row_view();
                let mut d = Tensor::zeros(xv.shape());
                for (drow, &gv) in d.data_mut().chunks_mut(cols.max(1)).zip(g.data()) {
                    drow.fill(gv);
                }
                acc(*x, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    acc(*p, Tensor::new(pv.shape().to_vec(), slice)?)?;
                }
            }
            Op::GatherRows(x, indices) => {
                let xv = self.value(*x);
                let (_, cols) = xv.row_view();
                let mut d = Tensor::zeros(xv.shape());
                for (k, &i) in indices.iter().enumerate() {
                    let src = g.row(k);
                    for (dv, sv) in d.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                        *dv += sv;
                    }
                }
                acc(*x, d)?;
            }
        }
        Ok(())
    }
}
