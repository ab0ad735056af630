//! Tape-style reverse-mode autodiff.
//!
//! A [`Graph`] records every op of one forward pass in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into the [`ParamStore`] and into leaf tensors
//! created with `requires_grad`.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOG_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Deliberate backward-rule corruption, used as a negative control by the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    GeluDerivative,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    WeightedNll {
        probs: Var,
        targets: Vec<usize>,
        weight: f64,
    },
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
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor>,
    fault: Option<BackwardFault>,
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    /// Constant or differentiable leaf.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.requires_grad);
        self.param_vars.insert(id, v);
        v
    }

    /// Gradient accumulated into a `requires_grad` leaf by previous backward calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_bt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(shape_err("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x + row`, broadcasting a single row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(shape_err("add_row", xv, rv));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for r in data.chunks_mut(c.max(1)) {
            r.iter_mut().zip(rv.data()).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::matrix(xv.rows(), c, data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row-wise softmax of `logits + mask`, where `mask` holds only `0` and
    /// `-inf`. Masked entries get exactly zero weight and never enter the
    /// normalizer. A row with no unmasked entry is an error.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != mask.rows() || lv.cols() != mask.cols() {
            return Err(shape_err("masked_softmax", lv, mask));
        }
        if let Some(bad) = mask.data().iter().find(|m| !(**m == 0.0 || **m == f64::NEG_INFINITY)) {
            return Err(Error::InvalidArgument(format!(
                "mask entries must be 0 or -inf, found {bad}"
            )));
        }
        let out = softmax_rows(lv, Some(mask))?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::Softmax(logits), rg))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let out = softmax_rows(self.value(logits), None)?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::Softmax(logits), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d < 2 {
            return Err(Error::Shape(format!(
                "layer_norm needs at least 2 columns, got {:?}",
                xv.shape()
            )));
        }
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Vertical concatenation; every part must have the same width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        };
        let c = self.cols(first);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err("concat_rows", self.value(first), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Horizontal concatenation; every part must have the same height.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        };
        let r = self.rows(first);
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        for &p in parts {
            if self.rows(p) != r {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let t = xv.slice_rows(start, len);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(xv.rows(), len, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {:?}",
                tv.shape()
            )));
        }
        let c = tv.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::matrix(indices.len(), c, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `i` of `x` at output row `rows[i]` of a `total`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let xv = self.value(x);
        if rows.len() != xv.rows() || rows.iter().any(|&r| r >= total) {
            return Err(Error::Shape(format!(
                "scatter_rows: {} target rows for {:?} into {total}",
                rows.len(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(vec![total, c]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `-weight · Σ_i ln(max(probs[i, targets[i]], 1e-12))`.
    pub fn weighted_nll(&mut self, probs: Var, targets: &[usize], weight: f64) -> Result<Var> {
        let pv = self.value(probs);
        if targets.len() != pv.rows() {
            return Err(Error::Shape(format!(
                "weighted_nll: {} targets for {:?}",
                targets.len(),
                pv.shape()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= pv.cols()) {
            return Err(Error::InvalidArgument(format!(
                "target index {bad} outside vocabulary of {}",
                pv.cols()
            )));
        }
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= weight * pv.get(i, t).max(LOG_FLOOR).ln();
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedNll {
                probs,
                targets: targets.to_vec(),
                weight,
            },
            rg,
        ))
    }

    /// Accumulates `d loss / d leaf` into every reachable parameter of `store`
    /// and every `requires_grad` leaf. Calling it again adds the gradients again.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    let acc = self
                        .leaf_grads
                        .entry(i)
                        .or_insert_with(|| Tensor::zeros(shape));
                    acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if rg(*a) {
                    let da = grad_slot(grads, *a, m * k);
                    // dA = dC · Bᵀ
                    gemm_bt_acc(g, bv.data(), da, m, n, k);
                }
                if rg(*b) {
                    let db = grad_slot(grads, *b, k * n);
                    // dB = Aᵀ · dC
                    gemm_at_acc(av.data(), g, db, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if rg(*a) {
                    let da = grad_slot(grads, *a, m * k);
                    gemm_acc(g, bv.data(), da, m, n, k);
                }
                if rg(*b) {
                    let db = grad_slot(grads, *b, n * k);
                    gemm_at_acc(g, av.data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::AddRow(x, row) => {
                if rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if rg(*row) {
                    let c = out.cols();
                    let dr = grad_slot(grads, *row, c);
                    for chunk in g.chunks(c.max(1)) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    let d: Vec<f64> = g.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if rg(*b) {
                    let d: Vec<f64> = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let skew = match self.fault {
                    Some(BackwardFault::GeluDerivative) => 1.1,
                    None => 1.0,
                };
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| gv * gelu_grad(xv) * skew)
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut d = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = &g[r * c..(r + 1) * c];
                    let s = dot(gy, y);
                    for j in 0..c {
                        d[r * c + j] = y[j] * (gy[j] - s);
                    }
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gv = val(*gain).data();
                if rg(*gain) {
                    let dg = grad_slot(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if rg(*bias) {
                    let db = grad_slot(grads, *bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let n = d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            dx[r * d + c] =
                                rstd[r] / n * (n * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).len();
                    if rg(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if rg(*p) {
                        let dp = grad_slot(grads, *p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let dx = grad_slot(grads, *x, xv.len());
                dx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (rows, c) = (xv.rows(), xv.cols());
                let w = out.cols();
                let dx = grad_slot(grads, *x, xv.len());
                for r in 0..rows {
                    for j in 0..w {
                        dx[r * c + start + j] += g[r * w + j];
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let tv = val(*table);
                let c = tv.cols();
                let dt = grad_slot(grads, *table, tv.len());
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[idx * c + j] += g[i * c + j];
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                let xv = val(*x);
                let c = xv.cols();
                let dx = grad_slot(grads, *x, xv.len());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[r * c + j];
                    }
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                let d = vec![g[0]; len];
                add_into(&mut grads[x.0], &d);
            }
            Op::WeightedNll {
                probs,
                targets,
                weight,
            } => {
                let pv = val(*probs);
                let c = pv.cols();
                let dp = grad_slot(grads, *probs, pv.len());
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv.get(i, t);
                    if p > LOG_FLOOR {
                        dp[i * c + t] -= g[0] * weight / p;
                    }
                }
            }
        }
    }
}

fn softmax_rows(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = x.row(r);
        let allowed = |j: usize| mask.is_none_or(|m| m.get(r, j) == 0.0);
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (j, &v) in row.iter().enumerate() {
            if !allowed(j) {
                continue;
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("softmax input {v} in row {r}")));
            }
            any = true;
            max = max.max(v);
        }
        if !any {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                o[j] = e;
                total += e;
            }
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::ParamKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_rejects_nan_logits() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::NonFinite(_))));
        let mask = m(1, 2, &[f64::NEG_INFINITY, 0.0]);
        assert!(g.masked_softmax(x, &mask).is_ok());
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        m(
            rows,
            cols,
            &(0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    /// Central-difference check of `build` w.r.t. every entry of every input.
    fn check_grads(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        let mut store = ParamStore::new();
        g.backward(loss, &mut store).unwrap();
        let eps = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).unwrap().clone();
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[idx] += delta;
                            }
                            g2.input(u, false)
                        })
                        .collect();
                    let l = build(&mut g2, &vs);
                    g2.value(l).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < tol,
                    "input {k} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut g = Graph::new();
        let a = g.constant(m(1, 2, &[1.0, 2.0]));
        let b = g.constant(m(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("and [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let w = random(&mut rng, 4, 3);
        check_grads(
            &[a, b],
            |g, v| {
                let c = g.matmul(v[0], v[1]).unwrap();
                let wv = g.constant(w.clone());
                let p = g.mul(c, wv).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4]));
        let y = g.masked_softmax(x, &Tensor::zeros(vec![1, 4])).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_ignores_masked_column() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 3, &[1.0, 2.0, 3.0]));
        let mask = m(1, 3, &[0.0, 0.0, f64::NEG_INFINITY]);
        let y = g.masked_softmax(x, &mask).unwrap();
        let e = std::f64::consts::E;
        let expect = [1.0 / (1.0 + e), e / (1.0 + e), 0.0];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(g.value(y).data()[2], 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]));
        let mask = m(2, 2, &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(
            g.masked_softmax(x, &mask),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_rejects_non_binary_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2]));
        assert!(g.masked_softmax(x, &m(1, 2, &[0.0, -5.0])).is_err());
    }

    #[test]
    fn masked_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 3, 4);
        let ninf = f64::NEG_INFINITY;
        let mask = m(
            3,
            4,
            &[0.0, ninf, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ninf, ninf, 0.0, ninf],
        );
        check_grads(
            &[x],
            |g, v| {
                let y = g.masked_softmax(v[0], &mask).unwrap();
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv).unwrap();
                g.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 3, &[2.0, 2.0, 2.0]));
        let gain = g.constant(Tensor::filled(vec![3], 1.0));
        let bias = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 2, &[1.0, 3.0]));
        let gain = g.constant(Tensor::filled(vec![2], 1.0));
        let bias = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 3, 5);
        let gain = random(&mut rng, 1, 5);
        let bias = random(&mut rng, 1, 5);
        let w = random(&mut rng, 3, 5);
        check_grads(
            &[x, gain, bias],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv).unwrap();
                g.sum(p)
            },
            1e-5,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 2, 4);
        let row = random(&mut rng, 1, 4);
        check_grads(
            &[a, b, row],
            |g, v| {
                let cat = g.concat_rows(&[v[0], v[1]]).unwrap();
                let shifted = g.add_row(cat, v[2]).unwrap();
                let left = g.slice_cols(shifted, 0, 2).unwrap();
                let right = g.slice_cols(shifted, 2, 2).unwrap();
                let swapped = g.concat_cols(&[right, left]).unwrap();
                let act = g.gelu(swapped);
                let picked = g.gather_rows(act, &[4, 0, 0, 2]).unwrap();
                let mid = g.slice_rows(picked, 1, 2).unwrap();
                let placed = g.scatter_rows(mid, &[2, 0], 3).unwrap();
                let sq = g.mul(placed, placed).unwrap();
                let scaled = g.scale(sq, 0.7);
                g.sum(scaled)
            },
            1e-6,
        );
    }

    #[test]
    fn nll_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, 3, 5);
        check_grads(
            &[x],
            |g, v| {
                let p = g.softmax(v[0]).unwrap();
                g.weighted_nll(p, &[1, 4, 0], 0.5).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 2]), true);
        let s = g.sum(x);
        g.backward(s, &mut ParamStore::new()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_quadratic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s, &mut ParamStore::new()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(
            g.backward(x, &mut ParamStore::new()),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_accumulates_and_skips_unreachable() {
        let mut store = ParamStore::new();
        let used = store.add("used", ParamKind::Weight, m(1, 2, &[1.0, 2.0]));
        let unused = store.add("unused", ParamKind::Weight, m(1, 2, &[1.0, 2.0]));
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let u2 = g.param(&store, used);
        assert_eq!(u, u2);
        let _ = g.param(&store, unused);
        let p = g.add(u, u2).unwrap();
        let s = g.sum(p);
        g.backward(s, &mut store).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.get(used).grad.data(), &[4.0, 4.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_row_operands_are_fine() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![0, 3]), true);
        let w = g.input(Tensor::filled(vec![3, 2], 1.0), true);
        let c = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(c), &[0, 2]);
        let other = g.constant(Tensor::filled(vec![2, 2], 1.0));
        let cat = g.concat_rows(&[c, other]).unwrap();
        let s = g.sum(cat);
        g.backward(s, &mut ParamStore::new()).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.0; 6]);
    }
}
