//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are pushed in
//! topological order, so `backward` is a single reverse sweep. Parameters enter
//! the graph through [`Graph::param`] and receive their gradients back in the
//! [`ParamStore`] they came from; repeated `backward` calls accumulate there
//! until [`ParamStore::zero_grad`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    AbsSum(Var),
    SumSquares(Var),
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` with respect to `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// A leaf that gradients flow into (used for inputs under test).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Bring a parameter into the graph; frozen parameters act as constants.
    /// Repeated requests within one graph share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, !store.is_frozen(id));
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (n, k2) = shape2(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt of {:?} by transposed {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Broadcast a `1×n` row over every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if self.value(row).numel() != n {
            return Err(Error::shape(format!(
                "add_row of {:?} and {:?}",
                self.value(a).shape(),
                self.value(row).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Row-wise layer normalisation with learned gain and bias (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                self.value(x).shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gs[j] + bs[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    fn check_finite(&self, a: Var, what: &str) -> Result<()> {
        if let Some(bad) = self.value(a).data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what} input contains {bad}")));
        }
        Ok(())
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let value = self.value(a).softmax(self.value(a).shape().len() - 1)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SoftmaxRows(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log_softmax")?;
        let (m, n) = shape2(self.value(a));
        let xs = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::LogSoftmaxRows(a), ng))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite(logits, "cross_entropy")?;
        let (m, n) = shape2(self.value(logits));
        if targets.len() != m {
            return Err(Error::shape(format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                self.value(logits).shape()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index(format!(
                "target {t} out of range for {n} classes"
            )));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            for j in 0..n {
                probs[i * n + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[i]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Rows `indices` of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = shape2(self.value(table));
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!(
                "row {bad} out of range for a table of {m} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::shape(format!(
                    "concat_rows with widths {n} and {}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, n], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..m {
                data[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if start + len > m {
            return Err(Error::Index(format!(
                "rows {start}..{} of a {m}-row tensor",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![len, n], data)?,
            Op::SliceRows { x, start },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        if start + len > n {
            return Err(Error::Index(format!(
                "columns {start}..{} of a {n}-column tensor",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![m, len], data)?,
            Op::SliceCols { x, start },
            ng,
        ))
    }

    fn reduce(&mut self, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Var {
        let value = Tensor::scalar(f(self.value(a).data()));
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Sum(a), |d| d.iter().sum())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Mean(a), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// L1 norm: `Σ |a|`.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        self.reduce(a, Op::AbsSum(a), |d| d.iter().map(|v| v.abs()).sum())
    }

    /// `Σ a²`.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        self.reduce(a, Op::SumSquares(a), |d| d.iter().map(|v| v * v).sum())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of parameter nodes are
    /// added to `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.ng(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            if node.needs_grad {
                propagate(head, node, g);
            }
        }
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
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

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
fn slot(head: &mut [Node], v: Var) -> Option<&mut [f64]> {
    let node = &mut head[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

/// Gradient buffer of `dst` together with the value of another node `src`.
fn with_grad_and_value(head: &mut [Node], dst: Var, src: Var, f: impl FnOnce(&mut [f64], &[f64])) {
    if !head[dst.0].needs_grad {
        return;
    }
    let (dn, sv) = if dst.0 == src.0 {
        let Node { value, grad, .. } = &mut head[dst.0];
        let n = value.numel();
        f(grad.get_or_insert_with(|| vec![0.0; n]), value.data());
        return;
    } else if dst.0 < src.0 {
        let (l, r) = head.split_at_mut(src.0);
        (&mut l[dst.0], r[0].value.data())
    } else {
        let (l, r) = head.split_at_mut(dst.0);
        (&mut r[0], l[src.0].value.data())
    };
    let n = dn.value.numel();
    f(dn.grad.get_or_insert_with(|| vec![0.0; n]), sv);
}

fn add_into(head: &mut [Node], v: Var, g: &[f64]) {
    if let Some(dst) = slot(head, v) {
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }
}

fn propagate(head: &mut [Node], node: &Node, g: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = shape2(&head[a.0].value);
            let n = out.cols();
            with_grad_and_value(head, *a, *b, |dst, bv| matmul_nt_into(g, bv, dst, m, n, k));
            with_grad_and_value(head, *b, *a, |dst, av| matmul_tn_into(av, g, dst, m, k, n));
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = shape2(&head[a.0].value);
            let n = out.cols();
            with_grad_and_value(head, *a, *b, |dst, bv| matmul_into(g, bv, dst, m, n, k));
            with_grad_and_value(head, *b, *a, |dst, av| matmul_tn_into(g, av, dst, m, n, k));
        }
        Op::Add(a, b) => {
            add_into(head, *a, g);
            add_into(head, *b, g);
        }
        Op::AddRow(a, row) => {
            add_into(head, *a, g);
            let n = out.cols();
            if let Some(dst) = slot(head, *row) {
                for chunk in g.chunks(n) {
                    for (d, s) in dst.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            add_into(head, *a, g);
            if let Some(dst) = slot(head, *b) {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            with_grad_and_value(head, *a, *b, |dst, bv| {
                for ((d, s), y) in dst.iter_mut().zip(g).zip(bv) {
                    *d += s * y;
                }
            });
            with_grad_and_value(head, *b, *a, |dst, av| {
                for ((d, s), x) in dst.iter_mut().zip(g).zip(av) {
                    *d += s * x;
                }
            });
        }
        Op::Scale(a, c) => {
            if let Some(dst) = slot(head, *a) {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += c * s;
                }
            }
        }
        Op::Gelu(a) => {
            with_grad_and_value(head, *a, *a, |dst, xs| {
                for ((d, s), &x) in dst.iter_mut().zip(g).zip(xs) {
                    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                    let t = u.tanh();
                    let du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
                    *d += s * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            });
        }
        Op::Tanh(a) => {
            if let Some(dst) = slot(head, *a) {
                for ((d, s), y) in dst.iter_mut().zip(g).zip(out.data()) {
                    *d += s * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(dst) = slot(head, *a) {
                for ((d, s), y) in dst.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y * (1.0 - y);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let m = out.rows();
            let gains = head[gain.0].value.data().to_vec();
            if let Some(dst) = slot(head, *gain) {
                for i in 0..m {
                    for j in 0..n {
                        dst[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            }
            if let Some(dst) = slot(head, *bias) {
                for i in 0..m {
                    for j in 0..n {
                        dst[j] += g[i * n + j];
                    }
                }
            }
            if let Some(dst) = slot(head, *x) {
                let nf = n as f64;
                for i in 0..m {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let dh = g[i * n + j] * gains[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[i * n + j];
                    }
                    for j in 0..n {
                        let dh = g[i * n + j] * gains[j];
                        dst[i * n + j] += inv_std[i] / nf
                            * (nf * dh - sum_dh - xhat[i * n + j] * sum_dh_h);
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let n = out.cols();
            if let Some(dst) = slot(head, *a) {
                for (i, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let inner = dot(grow, yrow);
                    for j in 0..n {
                        dst[i * n + j] += yrow[j] * (grow[j] - inner);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let n = out.cols();
            if let Some(dst) = slot(head, *a) {
                for (i, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for j in 0..n {
                        dst[i * n + j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let m = targets.len();
            let n = probs.len() / m;
            let scale = g[0] / m as f64;
            if let Some(dst) = slot(head, *logits) {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dst[i * n + j] += scale * (probs[i * n + j] - onehot);
                    }
                }
            }
        }
        Op::Gather { table, indices } => {
            let n = out.cols();
            if let Some(dst) = slot(head, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        dst[i * n + j] += g[r * n + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = head[p.0].value.numel();
                add_into(head, *p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let m = out.rows();
            let mut offset = 0;
            for p in parts {
                let c = head[p.0].value.cols();
                if let Some(dst) = slot(head, *p) {
                    for i in 0..m {
                        for j in 0..c {
                            dst[i * c + j] += g[i * total + offset + j];
                        }
                    }
                }
                offset += c;
            }
        }
        Op::SliceRows { x, start } => {
            let n = out.cols();
            if let Some(dst) = slot(head, *x) {
                for (d, s) in dst[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let len = out.cols();
            let m = out.rows();
            let n = head[x.0].value.cols();
            if let Some(dst) = slot(head, *x) {
                for i in 0..m {
                    for j in 0..len {
                        dst[i * n + start + j] += g[i * len + j];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(dst) = slot(head, *a) {
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(dst) = slot(head, *a) {
                let s = g[0] / dst.len() as f64;
                for d in dst.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::AbsSum(a) => {
            with_grad_and_value(head, *a, *a, |dst, xs| {
                for (d, &x) in dst.iter_mut().zip(xs) {
                    // subgradient 0 at the kink
                    let sign = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += g[0] * sign;
                }
            });
        }
        Op::SumSquares(a) => {
            with_grad_and_value(head, *a, *a, |dst, xs| {
                for (d, &x) in dst.iter_mut().zip(xs) {
                    *d += 2.0 * g[0] * x;
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (out.rows(), out.cols());
            if let Some(dst) = slot(head, *a) {
                // out is n_in×m_in = m×n, input is n×m
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] += g[i * n + j];
                    }
                }
            }
        }
        Op::Reshape(a) => add_into(head, *a, g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn check(shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
        let x = Tensor::randn(shape, 1.0, &mut rng(seed));
        finite_difference_check(f, &x, 1e-5).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let p = g.input(Tensor::randn(&[2, 3], 1.0, &mut rng(1)));
        let loss = g.sum(p);
        g.backward(loss, &mut ParamStore::new()).unwrap();
        assert!(g.grad(p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_of_squares_gives_twice_input() {
        let mut g = Graph::new();
        let t = Tensor::randn(&[4], 1.0, &mut rng(2));
        let p = g.input(t.clone());
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut ParamStore::new()).unwrap();
        for (gr, x) in g.grad(p).unwrap().data().iter().zip(t.data()) {
            assert!((gr - 2.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let p = g.input(Tensor::zeros(&[2]));
        assert!(matches!(
            g.backward(p, &mut ParamStore::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates_parameter_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(&[3], 2.0));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum_squares(w);
        g.backward(loss, &mut store).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[8.0, 8.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_parameters_receive_nothing() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::filled(&[3], 2.0));
        store.set_frozen(id, true);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum_squares(w);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut r = rng(40);
        let other = Tensor::randn(&[3, 4], 1.0, &mut r);
        let wide = Tensor::randn(&[4, 5], 1.0, &mut r);
        let row = Tensor::randn(&[1, 4], 1.0, &mut r);
        let gain = Tensor::randn(&[1, 4], 1.0, &mut r);
        let weights = Tensor::randn(&[3, 4], 1.0, &mut r);

        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
            ("matmul", Box::new(|g, x| {
                let b = g.constant(wide.clone());
                let y = g.matmul(x, b)?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            })),
            ("matmul-rhs", Box::new(|g, x| {
                let a = g.constant(other.transpose());
                let y = g.matmul(a, x)?;
                Ok(g.sum_squares(y))
            })),
            ("matmul_nt", Box::new(|g, x| {
                let b = g.constant(other.clone());
                let y = g.matmul_nt(x, b)?;
                let y2 = g.matmul_nt(b, x)?;
                let s = g.sum_squares(y);
                let t = g.sum(y2);
                g.add(s, t)
            })),
            ("add-sub-mul", Box::new(|g, x| {
                let c = g.constant(other.clone());
                let a = g.add(x, c)?;
                let s = g.sub(a, x)?;
                let m = g.mul(s, x)?;
                let m = g.mul(m, x)?;
                Ok(g.sum(m))
            })),
            ("add_row", Box::new(|g, x| {
                let r = g.constant(row.clone());
                let y = g.add_row(x, r)?;
                Ok(g.sum_squares(y))
            })),
            ("scale", Box::new(|g, x| {
                let y = g.scale(x, -2.5);
                Ok(g.sum_squares(y))
            })),
            ("gelu", Box::new(|g, x| {
                let y = g.gelu(x);
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })),
            ("sigmoid", Box::new(|g, x| {
                let y = g.sigmoid(x);
                Ok(g.sum_squares(y))
            })),
            ("layer_norm", Box::new(|g, x| {
                let ga = g.constant(gain.clone());
                let b = g.constant(row.clone());
                let y = g.layer_norm(x, ga, b)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            })),
            ("softmax", Box::new(|g, x| {
                let y = g.softmax_rows(x)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })),
            ("log_softmax", Box::new(|g, x| {
                let y = g.log_softmax_rows(x)?;
                let w = g.constant(weights.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            })),
            ("cross_entropy", Box::new(|g, x| g.cross_entropy(x, &[1, 3, 0]))),
            ("gather", Box::new(|g, x| {
                let y = g.gather_rows(x, &[2, 0, 2])?;
                Ok(g.sum_squares(y))
            })),
            ("concat-slice", Box::new(|g, x| {
                let a = g.slice_cols(x, 1, 2)?;
                let b = g.slice_rows(x, 1, 2)?;
                let c = g.concat_cols(&[a, x])?;
                let d = g.concat_rows(&[b, x])?;
                let s = g.sum_squares(c);
                let t = g.sum_squares(d);
                g.add(s, t)
            })),
            ("mean-abs", Box::new(|g, x| {
                let a = g.abs_sum(x);
                let b = g.mean(x);
                let b = g.scale(b, 3.0);
                g.add(a, b)
            })),
            ("transpose-reshape", Box::new(|g, x| {
                let t = g.transpose(x);
                let r = g.reshape(t, &[2, 6])?;
                let c = g.constant(Tensor::randn(&[6, 2], 1.0, &mut rng(9)));
                let y = g.matmul(r, c)?;
                Ok(g.sum_squares(y))
            })),
        ];
        for (i, (name, f)) in cases.iter().enumerate() {
            let err = check(&[3, 4], 100 + i as u64, f);
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let x = g.constant(Tensor::from_rows(&[vec![0.0, 80.0, 0.0]]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-30);
    }

    #[test]
    fn cross_entropy_matches_extended_precision_oracle() {
        // logits and reference loss computed with 40-digit arithmetic
        let logits = Tensor::from_rows(&[
            vec![0.5, -1.25, 2.0, 0.0, 0.75],
            vec![-0.3, 0.3, 1.1, -2.2, 0.05],
            vec![3.0, 2.5, -1.0, 0.4, 1.6],
        ]);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let l = g.cross_entropy(x, &[2, 4, 1]).unwrap();
        assert!((g.value(l).item() - 1.156_779_412_350_841_3).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // matmul → layer norm → softmax → cross-entropy
        let mut r = rng(77);
        let w = Tensor::randn(&[4, 6], 0.5, &mut r);
        let gain = Tensor::randn(&[1, 6], 1.0, &mut r);
        let bias = Tensor::randn(&[1, 6], 1.0, &mut r);
        let err = check(&[3, 4], 78, |g, x| {
            let wv = g.constant(w.clone());
            let h = g.matmul(x, wv)?;
            let ga = g.constant(gain.clone());
            let b = g.constant(bias.clone());
            let h = g.layer_norm(h, ga, b)?;
            let p = g.softmax_rows(h)?;
            let p = g.scale(p, 4.0);
            g.cross_entropy(p, &[0, 5, 2])
        });
        assert!(err < 1e-3, "{err}");
    }
}
