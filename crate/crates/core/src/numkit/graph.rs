//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep over
//! the node list. Gradients from several consumers of one node are summed.

use super::tensor::{note_degenerate_cosine, softmax_into, Tensor};
use super::NumError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    SoftmaxRows(Var, f64),
    NormalizeRows(Var),
    RowDots(Var, Var),
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    Pick(Var, usize),
    Stack(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of tensor operations. One graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf, `None` for constants and interior
    /// nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NumError> {
        if let Some(index) = value.first_non_finite() {
            return Err(NumError::NonFinite { op: op_name, index });
        }
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.record("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a).transpose()?;
        self.record("transpose", v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let v = self.value(a).map(|x| x * c);
        self.record("scale", v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let v = self.value(a).map(|x| x + c);
        self.record("add_const", v, Op::AddConst(a))
    }

    /// `max(0, x)`; the subgradient at exactly zero is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record("relu", v, Op::Relu(a))
    }

    /// `[x + margin]_+`, the hinge used by every ranking-style loss.
    pub fn hinge(&mut self, a: Var, margin: f64) -> Result<Var, NumError> {
        let shifted = self.add_const(a, margin)?;
        self.relu(shifted)
    }

    pub fn softmax_rows(&mut self, a: Var, temperature_inv: f64) -> Result<Var, NumError> {
        let v = self.value(a).softmax_rows(temperature_inv)?;
        self.record("softmax_rows", v, Op::SoftmaxRows(a, temperature_inv))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (v, zero_rows) = self.value(a).normalize_rows()?;
        for _ in 0..zero_rows {
            note_degenerate_cosine();
        }
        self.record("normalize_rows", v, Op::NormalizeRows(a))
    }

    /// Per-row dot products of two equally shaped matrices, as an `m×1`
    /// column.
    pub fn row_dots(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() || x.shape().len() != 2 {
            return Err(NumError::Shape {
                op: "row_dots",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let m = x.rows();
        let data = (0..m).map(|i| super::dot(x.row(i), y.row(i))).collect();
        self.record("row_dots", Tensor::raw(vec![m, 1], data), Op::RowDots(a, b))
    }

    /// Row-wise cosine similarity, recorded as normalize + dot.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        self.row_dots(an, bn)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let v = self.value(a).gather_rows(idx)?;
        self.record("gather_rows", v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let v = self.value(a).select_cols(idx)?;
        self.record("select_cols", v, Op::SelectCols(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record("sum", v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        if self.value(a).is_empty() {
            return Err(NumError::Empty { op: "mean" });
        }
        let v = Tensor::scalar(self.value(a).mean());
        self.record("mean", v, Op::Mean(a))
    }

    /// `log Σ exp(x)` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(NumError::Empty { op: "logsumexp" });
        }
        let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = x.data().iter().map(|v| (v - max).exp()).sum();
        let v = Tensor::scalar(max + total.ln());
        self.record("logsumexp", v, Op::LogSumExp(a))
    }

    /// Element at a flat row-major index, as a scalar.
    pub fn pick(&mut self, a: Var, flat_index: usize) -> Result<Var, NumError> {
        let x = self.value(a);
        if flat_index >= x.len() {
            return Err(NumError::Index {
                op: "pick",
                index: flat_index,
                len: x.len(),
            });
        }
        let v = Tensor::scalar(x.data()[flat_index]);
        self.record("pick", v, Op::Pick(a, flat_index))
    }

    /// Assembles one-element nodes into a tensor of the given shape.
    pub fn stack(&mut self, scalars: &[Var], shape: &[usize]) -> Result<Var, NumError> {
        let n: usize = shape.iter().product();
        if n != scalars.len() {
            return Err(NumError::DataLength {
                shape: shape.to_vec(),
                len: scalars.len(),
            });
        }
        let mut data = Vec::with_capacity(n);
        for &s in scalars {
            let t = self.value(s);
            if t.len() != 1 {
                return Err(NumError::Rank {
                    op: "stack",
                    expected: 0,
                    shape: t.shape().to_vec(),
                });
            }
            data.push(t.item());
        }
        self.record("stack", Tensor::raw(shape.to_vec(), data), Op::Stack(scalars.to_vec()))
    }

    /// Sum of scalar nodes, each multiplied by its weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NumError> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or(NumError::Empty { op: "weighted_sum" })
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumError> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(NumError::Rank {
                op: "backward",
                expected: 0,
                shape: loss_shape,
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(g);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = g.matmul(&bv.transpose()?)?;
                    let db = av.transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = g.zip_map(bv, "mul", |x, y| x * y)?;
                    let db = g.zip_map(av, "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| x * c)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let d = g.zip_map(x, "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a, t) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = super::dot(yr, gr);
                        for j in 0..n {
                            d[r * n + j] = t * yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::raw(y.shape().to_vec(), d));
                }
                Op::NormalizeRows(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let n = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let norm = super::l2_norm(x.row(r));
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = super::dot(yr, gr);
                        for j in 0..n {
                            d[r * n + j] = (gr[j] - yr[j] * proj) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::raw(y.shape().to_vec(), d));
                }
                Op::RowDots(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let n = av.cols();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for r in 0..av.rows() {
                        let gr = g.data()[r];
                        for j in 0..n {
                            da[r * n + j] = gr * bv.get(r, j);
                            db[r * n + j] = gr * av.get(r, j);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::raw(av.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::raw(bv.shape().to_vec(), db));
                }
                Op::GatherRows(a, idx) => {
                    let src = &self.nodes[a.0].value;
                    let n = src.cols();
                    let mut d = Tensor::zeros(src.shape());
                    let dd = d.data_mut();
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for j in 0..n {
                            dd[src_row * n + j] += g.data()[out_row * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SelectCols(a, idx) => {
                    let src = &self.nodes[a.0].value;
                    let n = src.cols();
                    let k = idx.len();
                    let mut d = Tensor::zeros(src.shape());
                    let dd = d.data_mut();
                    for r in 0..src.rows() {
                        for (c, &j) in idx.iter().enumerate() {
                            dd[r * n + j] += g.data()[r * k + c];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, Tensor::raw(shape, vec![g.item(); n]));
                }
                Op::Mean(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n = self.nodes[a.0].value.len();
                    let v = g.item() / n as f64;
                    accumulate(&mut grads, *a, Tensor::raw(shape, vec![v; n]));
                }
                Op::LogSumExp(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut w = vec![0.0; x.len()];
                    softmax_into(x.data(), 1.0, &mut w);
                    let gi = g.item();
                    w.iter_mut().for_each(|v| *v *= gi);
                    accumulate(&mut grads, *a, Tensor::raw(x.shape().to_vec(), w));
                }
                Op::Pick(a, idx) => {
                    let x = &self.nodes[a.0].value;
                    let mut d = Tensor::zeros(x.shape());
                    d.data_mut()[*idx] = g.item();
                    accumulate(&mut grads, *a, d);
                }
                Op::Stack(parts) => {
                    for (k, p) in parts.iter().enumerate() {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        accumulate(&mut grads, *p, Tensor::raw(shape, vec![g.data()[k]]));
                    }
                }
            }
        }

        // Unreached parameters get explicit zero gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf { requires_grad: true } => {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape()));
                    }
                }
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, -2.0, 3.0]]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, -2.0, 3.0]]));
        let d = g.row_dots(x, x).unwrap();
        let s = g.sum(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0]]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(NumError::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1.0, 2.0]]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x*x) + sum(3x) -> dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(t(&[vec![0.5, -1.0]]));
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq).unwrap();
        let three = g.scale(x, 3.0).unwrap();
        let b = g.sum(three).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 1.0]);
    }

    #[test]
    fn constants_have_no_gradient_and_unused_params_get_zero() {
        let mut g = Graph::new();
        let c = g.constant(t(&[vec![2.0]]));
        let unused = g.param(t(&[vec![7.0, 7.0]]));
        let x = g.param(t(&[vec![3.0]]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![0.0, 1.0, -1.0]]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[vec![1e300]]));
        assert!(matches!(g.scale(x, 1e300), Err(NumError::NonFinite { .. })));
    }
}
