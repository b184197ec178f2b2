//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node. Parameters are borrowed, not
//! copied, so a graph lives for one forward/backward pass and is consumed by
//! [`Graph::backward`]. Every op checks its output for NaN/Inf and fails with
//! [`EmaiError::NonFinite`] instead of propagating it.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};
use crate::{EmaiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Elu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    BatchVecMat(Var, Var),
    RowDot(Var, Var),
    SegmentSum {
        x: Var,
        segment: Vec<usize>,
        weight: Vec<f64>,
    },
    LogSoftmax(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(EmaiError::NonFinite(op.to_string()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EmaiError::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check(name, &value)?;
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(Cow::Owned(value), op, needs))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input, no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. saliency w.r.t. observations).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed trainable parameter.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed tensor treated as a constant.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(EmaiError::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `x [m, n] + b [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            return Err(EmaiError::Shape {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push_checked("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = elementwise(self.value(a), self.value(b), |x, y| x + y);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = elementwise(self.value(a), self.value(b), |x, y| x - y);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = elementwise(self.value(a), self.value(b), |x, y| x * y);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push_checked("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_checked("relu", out, Op::Relu(x), &[x])
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push_checked("elu", out, Op::Elu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push_checked("abs", out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push_checked("square", out, Op::Square(x), &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Elu => self.elu(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_checked("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(EmaiError::invalid("mean of empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_checked("mean", out, Op::Mean(x), &[x])
    }

    /// Picks `x[r, idx[r]]` for every row, giving `[m, 1]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (m, c) = (t.rows(), t.cols());
        if idx.len() != m || idx.iter().any(|&i| i >= c) {
            return Err(EmaiError::Shape {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let data = idx.iter().enumerate().map(|(r, &i)| t.data()[r * c + i]).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        self.push_checked("gather", out, Op::Gather(x, idx), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push_checked("reshape", out, Op::Reshape(x), &[x])
    }

    /// Per-row vector-matrix product: `q [B, n]` and `w [B, n*e]` (each row a
    /// row-major `n x e` matrix) give `out[b, :] = q[b, :] * W_b`, shape `[B, e]`.
    pub fn batch_vec_mat(&mut self, q: Var, w: Var) -> Result<Var> {
        let (tq, tw) = (self.value(q), self.value(w));
        let (bsz, n) = (tq.rows(), tq.cols());
        if tw.rows() != bsz || n == 0 || tw.cols() % n != 0 {
            return Err(EmaiError::Shape {
                op: "batch_vec_mat",
                left: tq.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let e = tw.cols() / n;
        let mut out = vec![0.0; bsz * e];
        for b in 0..bsz {
            let qr = tq.row(b);
            let wr = tw.row(b);
            let o = &mut out[b * e..(b + 1) * e];
            for (i, qi) in qr.iter().enumerate() {
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj += qi * wr[i * e + j];
                }
            }
        }
        let out = Tensor::new(vec![bsz, e], out)?;
        self.push_checked("batch_vec_mat", out, Op::BatchVecMat(q, w), &[q, w])
    }

    /// Row-wise dot product of two `[B, e]` tensors, giving `[B, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("row_dot", self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![ta.rows(), 1], data)?;
        self.push_checked("row_dot", out, Op::RowDot(a, b), &[a, b])
    }

    /// Weighted segment sum over a column: `out[s] = sum_{r: seg[r] = s} w[r] * x[r]`.
    pub fn segment_sum(
        &mut self,
        x: Var,
        segment: Vec<usize>,
        weight: Vec<f64>,
        n_segments: usize,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.len() != segment.len()
            || weight.len() != segment.len()
            || segment.iter().any(|&s| s >= n_segments)
        {
            return Err(EmaiError::Shape {
                op: "segment_sum",
                left: t.shape().to_vec(),
                right: vec![segment.len(), weight.len()],
            });
        }
        let mut out = vec![0.0; n_segments];
        for ((v, s), w) in t.data().iter().zip(&segment).zip(&weight) {
            out[*s] += w * v;
        }
        let out = Tensor::new(vec![n_segments, 1], out)?;
        self.push_checked("segment_sum", out, Op::SegmentSum { x, segment, weight }, &[x])
    }

    /// Row-wise log-softmax of `[m, a]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(vec![t.rows(), c], data)?;
        self.push_checked("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(EmaiError::Shape {
                op: "backward (loss must be scalar)",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*b) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % n] += v;
                    }
                    accumulate(&mut grads[b.0], Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], elementwise(g, val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], elementwise(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.map(|v| v * c));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let gx = elementwise(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Elu(x) => {
                if self.wants(*x) {
                    let gx = elementwise(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * xv.exp() });
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Abs(x) => {
                if self.wants(*x) {
                    let gx = elementwise(g, val(*x), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Square(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], elementwise(g, val(*x), |gv, xv| 2.0 * gv * xv));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let s = g.item();
                    accumulate(&mut grads[x.0], val(*x).map(|_| s));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let s = g.item() / val(*x).len() as f64;
                    accumulate(&mut grads[x.0], val(*x).map(|_| s));
                }
            }
            Op::Gather(x, idx) => {
                if self.wants(*x) {
                    let t = val(*x);
                    let c = t.cols();
                    let mut gx = Tensor::zeros(t.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        gx.data_mut()[r * c + i] = g.data()[r];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone().reshaped(val(*x).shape().to_vec())?);
                }
            }
            Op::BatchVecMat(q, w) => {
                let (tq, tw) = (val(*q), val(*w));
                let (bsz, n) = (tq.rows(), tq.cols());
                let e = tw.cols() / n;
                if self.wants(*q) {
                    let mut gq = Tensor::zeros(tq.shape());
                    for b in 0..bsz {
                        let gr = g.row(b);
                        let wr = tw.row(b);
                        for i in 0..n {
                            gq.data_mut()[b * n + i] =
                                (0..e).map(|j| gr[j] * wr[i * e + j]).sum::<f64>();
                        }
                    }
                    accumulate(&mut grads[q.0], gq);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(tw.shape());
                    for b in 0..bsz {
                        let gr = g.row(b);
                        let qr = tq.row(b);
                        let base = b * n * e;
                        for i in 0..n {
                            for j in 0..e {
                                gw.data_mut()[base + i * e + j] = qr[i] * gr[j];
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let e = ta.cols();
                let scale_rows = |t: &Tensor| {
                    let data = t
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * g.data()[i / e])
                        .collect();
                    Tensor::new(t.shape().to_vec(), data)
                };
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], scale_rows(tb)?);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], scale_rows(ta)?);
                }
            }
            Op::SegmentSum { x, segment, weight } => {
                if self.wants(*x) {
                    let data = segment
                        .iter()
                        .zip(weight)
                        .map(|(s, w)| w * g.data()[*s])
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::new(val(*x).shape().to_vec(), data)?);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    // d/dx_j = g_j - softmax_j * sum_k g_k
                    let out = &node.value;
                    let c = out.cols();
                    let mut gx = Vec::with_capacity(out.len());
                    for r in 0..out.rows() {
                        let gr = g.row(r);
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx.push(gr[j] - out.row(r)[j].exp() * gs);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(out.shape().to_vec(), gx)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_gradient_negative_side() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(-1.0));
        let y = g.relu(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![-2.0, 3.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(&[2, 2]));
        let y = g.relu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(f64::MAX));
        assert!(matches!(g.mul(x, x), Err(EmaiError::NonFinite(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::scalar(1.0));
        let z = g.input_with_grad(Tensor::scalar(2.0));
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(z).is_none());
        assert_eq!(grads.get_or_zeros(z).item(), 0.0);
    }
}
