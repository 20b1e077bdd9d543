//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op appends a node holding its output and enough context to run its
//! gradient rule. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because an op can only
//! consume nodes that already exist.
//!
//! Nodes whose inputs never touch a trainable parameter are marked as not
//! requiring gradients and are skipped during the backward walk, so frozen
//! parameters never receive gradient contributions.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    Mean(Var, usize),
    Sum(Var),
    Normalize(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = finite("constant", value)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.store.is_trainable(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = finite("matmul", self.value(a).matmul(self.value(b))?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = finite("matmul_nt", self.value(a).matmul_nt(self.value(b))?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let out = finite("add", x.zip_map(y, |p, q| p + q))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[1 x c]` row to every row of an `[r x c]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (r, c) = xv.dims2("add_row")?;
        if rv.shape() != [1, c] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", xv.shape(), rv.shape())));
        }
        let mut out = xv.clone();
        for i in 0..r {
            for (o, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let out = finite("add_row", out)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", x.shape(), y.shape())));
        }
        let out = finite("mul", x.zip_map(y, |p, q| p * q))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = finite("scale", self.value(x).map(|v| v * c))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", sv.shape())));
        }
        let c = sv.item();
        let out = finite("scale_by", self.value(x).map(|v| v * c))?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    /// Softmax of a matrix along `axis` (0 = down columns, 1 = across rows),
    /// computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = match axis {
            1 => softmax_rows(xv, None)?,
            0 => softmax_rows(&xv.transpose()?, None)?.transpose()?,
            _ => return Err(Error::shape("softmax", format!("invalid axis {axis}"))),
        };
        let out = finite("softmax", out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    /// Row softmax where columns with `keep[j] == false` get weight exactly 0.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let out = finite("masked_softmax", softmax_rows(self.value(x), Some(keep))?)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x, 1), rg))
    }

    /// Layer normalization over the last axis with `[1 x c]` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("layer_norm")?;
        if self.value(gamma).shape() != [1, c] || self.value(beta).shape() != [1, c] {
            return Err(Error::shape("layer_norm", "scale/offset must be [1 x cols]"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let out = finite("layer_norm", Tensor::new(vec![r, c], out)?)?;
        let xhat = Tensor::new(vec![r, c], xhat)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, c) = tv.dims2("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Invalid(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let r = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(pv.row(i));
            }
            offset += w;
        }
        let out = Tensor::new(vec![r, total], out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let out = Tensor::new(vec![end - start, c], xv.data()[start * c..end * c].to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, end - start], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Picks the listed columns, in the listed order.
    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("select_cols")?;
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape("select_cols", format!("column {bad} of {c}")));
        }
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = xv.row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let out = Tensor::new(vec![r, idx.len()], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectCols(x, idx.to_vec()), rg))
    }

    /// Mean over `axis`, keeping it as a length-1 dimension.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("mean")?;
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, v) in acc.iter_mut().zip(xv.row(i)) {
                        *a += v;
                    }
                }
                Tensor::new(vec![1, c], acc.into_iter().map(|a| a / r as f64).collect())?
            }
            1 => Tensor::new(
                vec![r, 1],
                (0..r).map(|i| xv.row(i).iter().sum::<f64>() / c as f64).collect(),
            )?,
            _ => return Err(Error::shape("mean", format!("invalid axis {axis}"))),
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Mean(x, axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = finite("sum", Tensor::scalar(self.value(x).sum()))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    /// `x / sum(x)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.sum();
        let out = finite("normalize", xv.map(|v| v / s))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Normalize(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, classes) = lv.dims2("cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= classes) {
            return Err(Error::Invalid(format!("target class {} outside 0..{classes}", t.0)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Invalid("cross entropy over an empty position set".into()));
        }
        let probs = softmax_rows(lv, None)?;
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] {
                let row = lv.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[targets[i]];
            }
        }
        let out = finite("cross_entropy", Tensor::scalar(total / count as f64))?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar and returns parameter gradients. Only
    /// trainable parameters get a slot.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients {
            slots: vec![None; self.store.len()],
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = self.value(Var(i));
            let mut send = |v: Var, t: Tensor| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.slots[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        send(*a, g.matmul_nt(self.value(*b))?)?;
                    }
                    if self.requires_grad(*b) {
                        send(*b, self.value(*a).matmul_tn(&g)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if self.requires_grad(*a) {
                        send(*a, g.matmul(self.value(*b))?)?;
                    }
                    if self.requires_grad(*b) {
                        send(*b, g.matmul_tn(self.value(*a))?)?;
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::AddRow(x, row) => {
                    if self.requires_grad(*row) {
                        let (r, c) = g.dims2("add_row")?;
                        let mut acc = vec![0.0; c];
                        for k in 0..r {
                            for (a, v) in acc.iter_mut().zip(g.row(k)) {
                                *a += v;
                            }
                        }
                        send(*row, Tensor::new(vec![1, c], acc)?)?;
                    }
                    send(*x, g)?;
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        send(*a, g.zip_map(self.value(*b), |p, q| p * q))?;
                    }
                    if self.requires_grad(*b) {
                        send(*b, g.zip_map(self.value(*a), |p, q| p * q))?;
                    }
                }
                Op::Scale(x, c) => send(*x, g.map(|v| v * c))?,
                Op::ScaleBy(x, s) => {
                    let sv = self.value(*s);
                    if self.requires_grad(*s) {
                        let ds: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                        send(*s, Tensor::new(sv.shape().to_vec(), vec![ds])?)?;
                    }
                    let c = sv.item();
                    send(*x, g.map(|v| v * c))?;
                }
                Op::Relu(x) => send(*x, g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 }))?,
                Op::Softmax(x, axis) => {
                    let dx = if *axis == 1 {
                        softmax_rows_backward(y, &g)?
                    } else {
                        softmax_rows_backward(&y.transpose()?, &g.transpose()?)?.transpose()?
                    };
                    send(*x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = g.dims2("layer_norm")?;
                    let gam = self.value(*gamma).data();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![0.0; c];
                        let mut db = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                let d = g.data()[i * c + j];
                                dg[j] += d * xhat.data()[i * c + j];
                                db[j] += d;
                            }
                        }
                        send(*gamma, Tensor::new(vec![1, c], dg)?)?;
                        send(*beta, Tensor::new(vec![1, c], db)?)?;
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                let dh = g.data()[i * c + j] * gam[j];
                                s1 += dh;
                                s2 += dh * xhat.data()[i * c + j];
                            }
                            let n = c as f64;
                            for j in 0..c {
                                let dh = g.data()[i * c + j] * gam[j];
                                dx[i * c + j] = inv_std[i] / n * (n * dh - s1 - xhat.data()[i * c + j] * s2);
                            }
                        }
                        send(*x, Tensor::new(vec![r, c], dx)?)?;
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    for (k, &id) in ids.iter().enumerate() {
                        for (a, v) in dt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(g.row(k)) {
                            *a += v;
                        }
                    }
                    send(*table, dt)?;
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = g.dims2("concat_cols")?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.requires_grad(p) {
                            let mut d = Vec::with_capacity(r * w);
                            for i in 0..r {
                                d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                            }
                            send(p, Tensor::new(vec![r, w], d)?)?;
                        }
                        offset += w;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let c = g.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(*x, dx)?;
                }
                Op::SliceCols(x, start) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (r, w) = g.dims2("slice_cols")?;
                    let mut dx = Tensor::zeros(&xs);
                    let c = xs[1];
                    for i in 0..r {
                        dx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    send(*x, dx)?;
                }
                Op::SelectCols(x, idx) => {
                    let xs = self.value(*x).shape().to_vec();
                    let mut dx = Tensor::zeros(&xs);
                    let c = xs[1];
                    for i in 0..g.rows() {
                        for (k, &j) in idx.iter().enumerate() {
                            dx.data_mut()[i * c + j] += g.get(i, k);
                        }
                    }
                    send(*x, dx)?;
                }
                Op::Mean(x, axis) => {
                    let xs = self.value(*x).shape().to_vec();
                    let (r, c) = (xs[0], xs[1]);
                    let mut dx = Tensor::zeros(&xs);
                    for i in 0..r {
                        for j in 0..c {
                            dx.data_mut()[i * c + j] = if *axis == 0 {
                                g.data()[j] / r as f64
                            } else {
                                g.data()[i] / c as f64
                            };
                        }
                    }
                    send(*x, dx)?;
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    send(*x, Tensor::full(self.value(*x).shape(), gv))?;
                }
                Op::Normalize(x) => {
                    let s = self.value(*x).sum();
                    let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    send(*x, g.map(|v| (v - dot) / s))?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let scale = g.item() / *count as f64;
                    let c = probs.cols();
                    let mut dx = Tensor::zeros(probs.shape());
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut dx.data_mut()[i * c..(i + 1) * c];
                        row.copy_from_slice(probs.row(i));
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    send(*logits, dx)?;
                }
            }
        }
        Ok(out)
    }
}

fn softmax_rows(x: &Tensor, keep: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims2("softmax")?;
    if let Some(k) = keep {
        if k.len() != c {
            return Err(Error::shape("softmax", format!("mask of {} for {c} columns", k.len())));
        }
    }
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = (0..c)
            .filter(|&j| kept(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Invalid("softmax over a fully masked row".into()));
        }
        let mut total = 0.0;
        for j in 0..c {
            if kept(j) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= total;
        }
    }
    Tensor::new(vec![r, c], out)
}

fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (r, c) = y.dims2("softmax")?;
    let mut dx = vec![0.0; r * c];
    for i in 0..r {
        let (yr, gr) = (y.row(i), g.row(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[i * c + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(vec![r, c], dx)
}

/// Softmax of a plain tensor along `axis`, outside any tape.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let v = tape.constant(x.clone())?;
    let y = tape.softmax(v, axis)?;
    Ok(tape.value(y).clone())
}
