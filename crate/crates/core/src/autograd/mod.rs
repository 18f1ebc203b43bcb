//! Minimal reverse-mode automatic differentiation over n-dimensional tensors.
//!
//! Every forward op records its parents on the tensor itself, so the live
//! graph is a DAG of reference-counted nodes. [`backward`] walks that DAG
//! once in reverse topological order and accumulates gradients additively
//! into every reachable node that requires them. All arithmetic is `f64`
//! and strictly sequential, so identical inputs produce bit-identical
//! outputs on every run and platform.
//!
//! Tensors are immutable after construction; only the gradient buffer is
//! interior-mutable. A graph belongs to one thread (the nodes are `Rc`),
//! which matches single-writer training: build, differentiate, drop.

mod gradcheck;
mod ops;
#[cfg(test)]
mod tests;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, InputSpec};
pub use ops::{concat_lastdim, dense, weighted_bce};

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Operation that produced a node, holding handles to its parents.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(Tensor, Tensor),
    /// `lhs + rhs` where `rhs.shape` is a suffix of `lhs.shape`; covers bias
    /// addition over the last dim and positional-encoding addition over a
    /// leading batch dim.
    AddBroadcast(Tensor, Tensor),
    /// Elementwise product of two same-shape tensors.
    Mul(Tensor, Tensor),
    /// Multiplication by a compile-time constant.
    Scale(Tensor, f64),
    /// 2-D matrix product.
    Matmul(Tensor, Tensor),
    /// Batched 3-D matrix product `[B,m,k] x [B,k,n]`.
    Bmm(Tensor, Tensor),
    /// Swap the last two axes.
    TransposeLast2(Tensor),
    Reshape(Tensor),
    /// Contiguous slice of the last axis.
    SliceLast { x: Tensor, start: usize, len: usize },
    /// Concatenation of several tensors along the last axis.
    ConcatLast(Vec<Tensor>),
    Relu(Tensor),
    Sigmoid(Tensor),
    SoftmaxLast(Tensor),
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, eps: f64 },
    /// Inverted dropout; `mask` holds 0 or 1/(1-rate) per element.
    Dropout { x: Tensor, mask: Vec<f64> },
    /// Valid (no padding) 1-D convolution.
    Conv1d { x: Tensor, w: Tensor, bias: Tensor, stride: usize },
    /// `argmax` stores the flat input index that won each output cell, so the
    /// backward pass routes gradient to the first maximum of every window.
    MaxPool1d { x: Tensor, pool: usize, stride: usize, argmax: Vec<usize> },
    MeanAll(Tensor),
    SumAll(Tensor),
    /// Class-weighted binary cross-entropy against fixed labels.
    WeightedBce { p: Tensor, y: Vec<f64>, w_pos: f64, w_neg: f64 },
}

#[derive(Debug)]
pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

/// N-dimensional `f64` tensor, row-major, cheap to clone (shared node).
#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant leaf (not differentiated through).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, false)
    }

    /// Leaf that accumulates gradient, i.e. a trainable parameter.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Arg(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![0.0; numel], false, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new_node(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    fn accumulate(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn parents(&self) -> Vec<&Tensor> {
        match &self.inner.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Mul(a, b) | Op::Matmul(a, b)
            | Op::Bmm(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::TransposeLast2(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxLast(a)
            | Op::MeanAll(a)
            | Op::SumAll(a) => vec![a],
            Op::SliceLast { x, .. } | Op::Dropout { x, .. } | Op::MaxPool1d { x, .. } => {
                vec![x]
            }
            Op::ConcatLast(xs) => xs.iter().collect(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv1d { x, w, bias, .. } => vec![x, w, bias],
            Op::WeightedBce { p, .. } => vec![p],
        }
    }
}

/// Reverse-mode sweep from a scalar loss.
///
/// Visits each reachable node exactly once in reverse topological order and
/// sums contributions across fan-out, so shared subexpressions accumulate.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Arg(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        // Nothing reachable wants a gradient.
        return Ok(());
    }

    // Iterative post-order DFS; recursion depth would be fine for this model
    // family but the iterative form costs nothing.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    loss.accumulate(&[1.0]);
    for node in order.iter().rev() {
        let grad = match node.inner.grad.borrow().clone() {
            Some(g) => g,
            None => continue,
        };
        ops::backprop(node, &grad);
    }
    Ok(())
}

/// Hash of every decision point (ReLU sign mask, maxpool argmax) in the graph
/// below `output`. Two evaluations with the same signature took the same side
/// of every kink, which makes finite-difference comparisons meaningful.
pub fn kink_signature(output: &Tensor) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a offset basis
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack = vec![output.clone()];
    let mut nodes: Vec<Tensor> = Vec::new();
    while let Some(node) = stack.pop() {
        if !visited.insert(node.id()) {
            continue;
        }
        for p in node.parents() {
            stack.push(p.clone());
        }
        nodes.push(node);
    }
    // Graph construction order is deterministic, so sorting by id gives a
    // stable traversal independent of DFS details.
    nodes.sort_by_key(|t| t.id());
    let mut feed = |hash: &mut u64, byte: u8| {
        *hash ^= u64::from(byte);
        *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    };
    let mut seq = 0u8;
    for node in &nodes {
        match &node.inner.op {
            Op::Relu(x) => {
                seq = seq.wrapping_add(1);
                feed(&mut hash, seq);
                for chunk in x.data().chunks(8) {
                    let mut bits = 0u8;
                    for (i, v) in chunk.iter().enumerate() {
                        if *v > 0.0 {
                            bits |= 1 << i;
                        }
                    }
                    feed(&mut hash, bits);
                }
            }
            Op::MaxPool1d { argmax, .. } => {
                seq = seq.wrapping_add(1);
                feed(&mut hash, seq);
                for idx in argmax {
                    for b in idx.to_le_bytes() {
                        feed(&mut hash, b);
                    }
                }
            }
            _ => {}
        }
    }
    hash
}
