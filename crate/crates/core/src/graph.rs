//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Node ids are handed
//! out in execution order, so the inputs of node `k` always have ids below
//! `k` and the reverse sweep in [`Graph::backward`] is a single pass over the
//! node list from the end. Build a fresh graph per forward pass.
//!
//! Leaves come in two kinds. [`Graph::variable`] leaves receive gradients;
//! [`Graph::constant`] leaves never appear in the gradient map.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Variable,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(NodeId, NodeId),
    Sum(NodeId),
    /// Mean softmax cross-entropy. Keeps the row probabilities for the
    /// backward pass.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Variable => "variable",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Variable | Op::Constant => vec![],
            Op::Transpose(a) | Op::Relu(a) | Op::SoftmaxRows(a) | Op::Sum(a) | Op::Scale(a, _) => {
                vec![*a]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every variable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    /// Remove and return the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Operator tag of a node, e.g. `"matmul"`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Variable, value)
    }

    /// A leaf treated as a constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// `x + broadcast(bias)` where `bias` is `1 × cols`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(x, bias), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `factor * x`.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|t| t * factor);
        self.push(Op::Scale(x, factor), v)
    }

    /// `max(0, x)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).softmax_rows()?;
        Ok(self.push(Op::SoftmaxRows(x), v))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    /// `x · w + b`, composed from [`Graph::matmul`] and [`Graph::add_row`].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Sum of all elements, as a `1 × 1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.rank() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits shape {:?}", z.shape()),
            ));
        }
        let (n, m) = (z.rows(), z.cols());
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Empty("cross_entropy batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: m,
            });
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let probs = z.softmax_rows()?;
        let loss = Tensor::scalar(total / n as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            loss,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every variable leaf gets an entry,
    /// zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }

        // Only nodes downstream of a variable carry gradient.
        let mut needs = vec![false; self.nodes.len()];
        for (k, node) in self.nodes.iter().enumerate() {
            needs[k] = match node.op {
                Op::Variable => true,
                Op::Constant => false,
                ref op => op.inputs().iter().any(|i| needs[i.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for k in (0..=loss.0).rev() {
            if !needs[k] {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            match &node.op {
                Op::Variable => {
                    grads[k] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        let da = g.matmul(&self.value(*b).transpose()?)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if needs[b.0] {
                        let db = self.value(*a).transpose()?.matmul(&g)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose()?)?;
                }
                Op::Add(a, b) => {
                    if needs[a.0] {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if needs[b.0] {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::AddRow(x, b) => {
                    if needs[b.0] {
                        let c = g.cols();
                        let mut db = Tensor::zeros(1, c);
                        for i in 0..g.rows() {
                            for (d, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db)?;
                    }
                    if needs[x.0] {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a.0] {
                        let da = g.zip_map(self.value(*b), "mul", |u, v| u * v)?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if needs[b.0] {
                        let db = g.zip_map(self.value(*a), "mul", |u, v| u * v)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, g.map(|u| u * factor))?;
                }
                Op::Relu(x) => {
                    let dx =
                        g.zip_map(self.value(*x), "relu", |u, v| if v > 0.0 { u } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = g.clone();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let dot: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = yr[j] * (*d - dot);
                        }
                    }
                    debug_assert_eq!(dx.cols(), c);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(a, b) => {
                    let (ga, gb) = g.split_cols(self.value(*a).cols())?;
                    if needs[a.0] {
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if needs[b.0] {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    let xv = self.value(*x);
                    let dx = Tensor::new(xv.shape().to_vec(), vec![s; xv.len()])?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dz = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        dz.row_mut(i)[l] -= 1.0;
                    }
                    for v in dz.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, dz)?;
                }
            }
        }

        let mut map = BTreeMap::new();
        for (k, node) in self.nodes.iter().enumerate() {
            if let Op::Variable = node.op {
                let g = grads[k].take().unwrap_or_else(|| node.value.zeros_like());
                map.insert(NodeId(k), g);
            }
        }
        Ok(Gradients { map })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_rows(&[[1.0, -2.0, 3.5], [0.0, 4.0, 9.0]]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(2, 3));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_rows(&[[1.0, -2.0]]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_rows(&[[-3.0, 5.0, 0.0]]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 5.0, 0.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_gradient_splits_into_ones() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = g.variable(Tensor::from_rows(&[[5.0], [6.0]]).unwrap());
        let c = g.concat_cols(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &Tensor::ones(2, 2));
        assert_eq!(grads.get(b).unwrap(), &Tensor::ones(2, 1));
    }

    #[test]
    fn unused_variable_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(1, 2));
        let unused = g.variable(Tensor::ones(3, 4));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(3, 4));
    }

    #[test]
    fn constants_have_no_gradient_entry() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(2, 2));
        let c = g.constant(Tensor::eye(2));
        let y = g.matmul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.contains(x));
        assert!(!grads.contains(c));
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(2, 2));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::zeros(1, 4));
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let z = g.variable(Tensor::from_rows(&[[0.0, 30.0, 0.0]]).unwrap());
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::zeros(2, 3));
        assert!(matches!(
            g.cross_entropy(z, &[0, 3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn inputs_precede_node() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::ones(2, 3));
        let b = g.variable(Tensor::ones(3, 2));
        let c = g.matmul(a, b).unwrap();
        let t = g.transpose(c).unwrap();
        let s = g.sum(t);
        for id in [c, t, s] {
            assert!(g.inputs(id).iter().all(|i| i < &id));
        }
        assert_eq!(g.op_name(c), "matmul");
    }
}
