//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node to the [`Tape`] and returns a [`Var`] handle to it.
//! Nodes are stored in construction order, which is a topological order of the
//! graph; [`Tape::backward`] walks them in exact reverse.
//!
//! A node requires a gradient iff one of its inputs does. Leaves created with
//! [`Tape::variable`] require gradients, leaves created with
//! [`Tape::constant`] (and frozen parameters) do not, so work behind frozen
//! subgraphs is skipped entirely during the reverse pass.

mod kernels;
mod ops;

pub use ops::{adaptive_bin, NORM_EPS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    AddChannelBias { input: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SpatialMax { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Sign(Var),
    L2Norm(Var),
    NormalizeRows(Var),
    AdaptiveMaxPool1d { input: Var, argmax: Vec<usize> },
    AdaptiveAvgPool1d(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// The recording of one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is populated by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    /// Copies the value of `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Clears gradients so `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Populates gradients of `loss` for every node that requires one and is
    /// reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::EmptyTape(
                "loss is not connected to any trainable value".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (true, Some(g)) = (node.requires_grad, g) {
                let shape = node.value.shape().to_vec();
                node.grad = Some(Tensor::new(shape, g)?);
            }
        }
        self.backward_done = true;
        Ok(())
    }
}
