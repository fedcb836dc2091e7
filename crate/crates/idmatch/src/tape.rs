//! Minimal reverse-mode gradient tape.
//!
//! Nodes live in one append-only arena and refer to parents by index, so the
//! graph is acyclic by construction and a single reverse sweep visits each
//! node once. The op set is exactly what the matching loss needs: matmul (and
//! its A·Bᵀ variant), stabilized row softmax with an optional column mask,
//! pointwise add/sub/mul/scale/neg, a masked sum over a row and column set,
//! scalar division, mean, and mean squared error against a constant target.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    RowSoftmax { src: usize, col_mask: Option<Vec<bool>> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { src: usize, k: f64 },
    Neg { src: usize },
    AddConst { src: usize },
    MaskedSum { src: usize, rows: Vec<usize>, cols: Vec<usize> },
    Div { num: usize, den: usize },
    Mean { src: usize },
    SqErrMean { src: usize, target: Tensor },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the most recent `backward` call.
    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    // ── differentiable ops ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNT { a: a.0, b: b.0 }))
    }

    /// Row softmax over enabled columns; disabled columns are exactly zero.
    pub fn row_softmax(&mut self, src: Var, col_mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(src);
        if x.shape().len() != 2 {
            return Err(Error::shape("row_softmax", format!("need 2-d input, got {:?}", x.shape())));
        }
        if let Some(m) = col_mask {
            if m.len() != x.cols() {
                return Err(Error::shape(
                    "row_softmax",
                    format!("mask length {} vs {} columns", m.len(), x.cols()),
                ));
            }
            if !m.iter().any(|&e| e) {
                return Err(Error::domain("row_softmax: all columns disabled"));
            }
        }
        let value = row_softmax_forward(x, col_mask);
        Ok(self.push(value, Op::RowSoftmax { src: src.0, col_mask: col_mask.map(|m| m.to_vec()) }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, src: Var, k: f64) -> Var {
        let value = self.value(src).scale(k);
        self.push(value, Op::Scale { src: src.0, k })
    }

    pub fn neg(&mut self, src: Var) -> Var {
        let value = self.value(src).neg();
        self.push(value, Op::Neg { src: src.0 })
    }

    pub fn add_const(&mut self, src: Var, k: f64) -> Var {
        let value = Tensor::from_fn(self.value(src).shape(), |i| self.value(src).data()[i] + k);
        self.push(value, Op::AddConst { src: src.0 })
    }

    /// Scalar sum of src over the cartesian product rows × cols.
    pub fn masked_sum(&mut self, src: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let x = self.value(src);
        if x.shape().len() != 2 {
            return Err(Error::shape("masked_sum", format!("need 2-d input, got {:?}", x.shape())));
        }
        let (h, w) = (x.rows(), x.cols());
        if rows.iter().any(|&r| r >= h) || cols.iter().any(|&c| c >= w) {
            return Err(Error::shape("masked_sum", format!("index out of range for {:?}", x.shape())));
        }
        let mut acc = 0.0;
        for &r in rows {
            let row = &x.data()[r * w..(r + 1) * w];
            for &c in cols {
                acc += row[c];
            }
        }
        Ok(self.push(Tensor::scalar(acc), Op::MaskedSum { src: src.0, rows: rows.to_vec(), cols: cols.to_vec() }))
    }

    /// Scalar division num / den; both operands must be scalars.
    pub fn div(&mut self, num: Var, den: Var) -> Result<Var> {
        if !self.value(num).is_scalar() || !self.value(den).is_scalar() {
            return Err(Error::domain("div: both operands must be scalar nodes"));
        }
        let v = self.value(num).scalar_value() / self.value(den).scalar_value();
        Ok(self.push(Tensor::scalar(v), Op::Div { num: num.0, den: den.0 }))
    }

    pub fn mean(&mut self, src: Var) -> Var {
        let v = self.value(src).mean();
        self.push(Tensor::scalar(v), Op::Mean { src: src.0 })
    }

    /// Mean over all entries of (src − target)², target held constant.
    pub fn sq_err_mean(&mut self, src: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(src);
        if x.shape() != target.shape() {
            return Err(Error::shape(
                "sq_err_mean",
                format!("shapes differ: {:?} vs {:?}", x.shape(), target.shape()),
            ));
        }
        let n = x.len() as f64;
        let v = x.data().iter().zip(target.data()).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(v), Op::SqErrMean { src: src.0, target: target.clone() }))
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Gradient accumulators are re-zeroed
    /// first, so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = Tensor::zeros(node.value.shape());
        }
        self.nodes[loss.0].grad = Tensor::scalar(1.0);

        for idx in (0..=loss.0).rev() {
            // Split borrows: take the node's grad, scatter into parents.
            let grad = std::mem::replace(&mut self.nodes[idx].grad, Tensor::zeros(&[1]));
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul_nt(&self.nodes[b].value)?; // G·Bᵀ
                    let db = {
                        // Aᵀ·G computed as (Gᵀ·A)ᵀ-free loop: accumulate directly.
                        let av = &self.nodes[a].value;
                        let (p, d) = (av.rows(), av.cols());
                        let q = grad.cols();
                        let mut out = Tensor::zeros(&[d, q]);
                        for i in 0..p {
                            for k in 0..d {
                                let a_ik = av.get2(i, k);
                                if a_ik == 0.0 {
                                    continue;
                                }
                                for j in 0..q {
                                    let v = out.get2(k, j) + a_ik * grad.get2(i, j);
                                    out.set2(k, j, v);
                                }
                            }
                        }
                        out
                    };
                    accumulate(&mut self.nodes[a].grad, &da);
                    accumulate(&mut self.nodes[b].grad, &db);
                }
                Op::MatMulNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul(&self.nodes[b].value)?; // G·B
                    let db = {
                        // dB = Gᵀ·A for C = A·Bᵀ.
                        let av = &self.nodes[a].value;
                        let (p, d) = (av.rows(), av.cols());
                        let q = grad.cols();
                        let mut out = Tensor::zeros(&[q, d]);
                        for i in 0..p {
                            for j in 0..q {
                                let g_ij = grad.get2(i, j);
                                if g_ij == 0.0 {
                                    continue;
                                }
                                for k in 0..d {
                                    let v = out.get2(j, k) + g_ij * av.get2(i, k);
                                    out.set2(j, k, v);
                                }
                            }
                        }
                        out
                    };
                    accumulate(&mut self.nodes[a].grad, &da);
                    accumulate(&mut self.nodes[b].grad, &db);
                }
                Op::RowSoftmax { src, col_mask } => {
                    let src = *src;
                    let y = &self.nodes[idx].value;
                    let (p, q) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(&[p, q]);
                    for i in 0..p {
                        let mut dot = 0.0;
                        for j in 0..q {
                            dot += grad.get2(i, j) * y.get2(i, j);
                        }
                        for j in 0..q {
                            let enabled = col_mask.as_ref().map_or(true, |m| m[j]);
                            if enabled {
                                dx.set2(i, j, y.get2(i, j) * (grad.get2(i, j) - dot));
                            }
                        }
                    }
                    accumulate(&mut self.nodes[src].grad, &dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.nodes[a].grad, &grad);
                    accumulate(&mut self.nodes[b].grad, &grad);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.nodes[a].grad, &grad);
                    let ng = grad.neg();
                    accumulate(&mut self.nodes[b].grad, &ng);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = grad.mul(&self.nodes[b].value)?;
                    let db = grad.mul(&self.nodes[a].value)?;
                    accumulate(&mut self.nodes[a].grad, &da);
                    accumulate(&mut self.nodes[b].grad, &db);
                }
                Op::Scale { src, k } => {
                    let (src, k) = (*src, *k);
                    let d = grad.scale(k);
                    accumulate(&mut self.nodes[src].grad, &d);
                }
                Op::Neg { src } => {
                    let src = *src;
                    let d = grad.neg();
                    accumulate(&mut self.nodes[src].grad, &d);
                }
                Op::AddConst { src } => {
                    let src = *src;
                    accumulate(&mut self.nodes[src].grad, &grad);
                }
                Op::MaskedSum { src, rows, cols } => {
                    let src = *src;
                    let g = grad.scalar_value();
                    let w = self.nodes[src].value.cols();
                    let (rows, cols) = (rows.clone(), cols.clone());
                    let gdata = self.nodes[src].grad.data_mut();
                    for &r in &rows {
                        for &c in &cols {
                            gdata[r * w + c] += g;
                        }
                    }
                }
                Op::Div { num, den } => {
                    let (num, den) = (*num, *den);
                    let g = grad.scalar_value();
                    let nv = self.nodes[num].value.scalar_value();
                    let dv = self.nodes[den].value.scalar_value();
                    self.nodes[num].grad.data_mut()[0] += g / dv;
                    self.nodes[den].grad.data_mut()[0] += -g * nv / (dv * dv);
                }
                Op::Mean { src } => {
                    let src = *src;
                    let g = grad.scalar_value() / self.nodes[src].value.len() as f64;
                    for v in self.nodes[src].grad.data_mut() {
                        *v += g;
                    }
                }
                Op::SqErrMean { src, target } => {
                    let src = *src;
                    let g = grad.scalar_value();
                    let n = self.nodes[src].value.len() as f64;
                    let diffs: Vec<f64> = self.nodes[src]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, t)| 2.0 * (a - t) * g / n)
                        .collect();
                    for (gv, d) in self.nodes[src].grad.data_mut().iter_mut().zip(diffs) {
                        *gv += d;
                    }
                }
            }
            self.nodes[idx].grad = grad;
        }
        Ok(())
    }
}

fn accumulate(into: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(into.shape(), g.shape());
    for (a, b) in into.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Stabilized softmax per row over enabled columns (disabled columns → 0).
pub fn row_softmax_forward(x: &Tensor, col_mask: Option<&[bool]>) -> Tensor {
    let (p, q) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[p, q]);
    for i in 0..p {
        let row = &x.data()[i * q..(i + 1) * q];
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if col_mask.map_or(true, |m| m[j]) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        let mut exps = vec![0.0; q];
        for (j, &v) in row.iter().enumerate() {
            if col_mask.map_or(true, |m| m[j]) {
                let e = (v - max).exp();
                exps[j] = e;
                sum += e;
            }
        }
        for j in 0..q {
            if exps[j] != 0.0 {
                out.set2(i, j, exps[j] / sum);
            }
        }
    }
    out
}
