//! Tensor handle and the reverse-mode tape.
//!
//! A `Tensor` is a reference-counted node in a dynamically built graph. Every
//! node carries a per-thread sequence number assigned at creation, so creation
//! order is a valid topological order: an operation's inputs always exist
//! before its output. [`Tape::record`] collects the nodes reachable from a loss
//! in that order and [`Tensor::backward`] replays it in reverse.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::ops::Op;
use crate::error::{Result, SluError};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) op: RefCell<Option<Op>>,
    consumed: Cell<bool>,
}

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: RefCell::new(op),
            consumed: Cell::new(false),
        }))
    }

    fn checked(data: Vec<f64>, shape: &[usize]) -> Result<(Vec<usize>, Arc<Vec<f64>>)> {
        if shape.iter().any(|&d| d == 0) {
            return Err(SluError::invalid(format!("tensor shape {shape:?} has a zero dimension")));
        }
        if numel(shape) != data.len() {
            return Err(SluError::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok((shape.to_vec(), Arc::new(data)))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let (shape, data) = Self::checked(data, shape)?;
        Ok(Self::build(shape, data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let (shape, data) = Self::checked(data, shape)?;
        Ok(Self::build(shape, data, true, None))
    }

    /// Leaf sharing storage with a parameter buffer; no copy is made.
    pub(crate) fn shared_leaf(data: Arc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Self {
        Self::build(shape.to_vec(), data, requires_grad, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], Arc::new(vec![value]), false, None)
    }

    /// Output of an operation. The op is retained only if some input requires grad.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let requires_grad = op.any_input_requires_grad();
        let op = requires_grad.then_some(op);
        Self::build(shape, Arc::new(data), requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    #[cfg(test)]
    pub(crate) fn shared_data(&self) -> &Arc<Vec<f64>> {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(SluError::invalid(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(SluError::NotScalar(self.0.shape.clone()));
        }
        Ok(self.0.data[0])
    }

    /// Value copy detached from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backpropagate from a scalar loss.
    ///
    /// Gradients accumulate additively into every reachable leaf that requires
    /// grad; call [`Tensor::zero_grad`] on leaves to reset them. The recorded
    /// operations are released afterwards, so a second call on the same graph
    /// fails with [`SluError::GraphConsumed`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(SluError::NotScalar(self.0.shape.clone()));
        }
        if self.0.consumed.get() {
            return Err(SluError::GraphConsumed);
        }
        if !self.0.requires_grad {
            return Err(SluError::NotOnTape);
        }
        let tape = Tape::record(self)?;
        self.accumulate_grad(&[1.0]);
        for node in tape.nodes.iter().rev() {
            let op = node.0.op.borrow_mut().take();
            let Some(op) = op else { continue };
            let upstream = node.0.grad.borrow_mut().take();
            if let Some(upstream) = upstream {
                for (parent, g) in op.backward(node, &upstream) {
                    parent.accumulate_grad(&g);
                }
            }
            node.0.consumed.set(true);
        }
        self.0.consumed.set(true);
        Ok(())
    }
}

/// Recorded operations reachable from a root, in topological order.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Result<Tape> {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.0.requires_grad || !seen.insert(t.0.id) {
                continue;
            }
            if t.0.consumed.get() {
                return Err(SluError::GraphConsumed);
            }
            if let Some(op) = t.0.op.borrow().as_ref() {
                stack.extend(op.inputs().into_iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.0.id);
        Ok(Tape { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(node id, input ids)` per recorded entry, inputs-first order.
    pub fn entries(&self) -> Vec<(u64, Vec<u64>)> {
        self.nodes
            .iter()
            .map(|t| {
                let inputs = t.0.op.borrow().as_ref().map_or_else(Vec::new, |op| {
                    op.inputs()
                        .into_iter()
                        .filter(|i| i.requires_grad())
                        .map(|i| i.0.id)
                        .collect()
                });
                (t.0.id, inputs)
            })
            .collect()
    }
}
