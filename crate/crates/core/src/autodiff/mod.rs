//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] records every op applied to its [`Var`]s in creation order.
//! [`Tape::backward`] walks the records once in reverse and leaves
//! gradients on the leaves that asked for them. A tape is single-use: build
//! a fresh one for every forward pass.

mod elementwise;
mod grad_check;
mod linalg;
mod nn;
mod shape_ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

pub use elementwise::{
    sigmoid, silu as silu_scalar, softplus as softplus_scalar, BinaryKind, UnaryKind,
    SOFTPLUS_THRESHOLD,
};
pub use grad_check::{grad_check, grad_check_many, GRAD_CHECK_EPS};
pub use nn::{avg_pool2d_forward, depthwise_conv2d_forward, LAYER_NORM_EPS};

use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

/// Gradients for each input of a node; `None` where no gradient flows.
pub(crate) type InputGrads<T> = Vec<Option<Vec<T>>>;

/// What a backward rule sees: the upstream gradient, the node's output and
/// its inputs' forward values, and which inputs need a gradient at all.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> InputGrads<T>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// The record of one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// A tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}<{}>{:?}", self.id, node.op, node.value.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Op tags in creation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    pub(crate) fn check_same(&self, vars: &[Var<'_, T>]) -> Result<()> {
        if vars.iter().all(|v| std::ptr::eq(v.tape, self)) {
            Ok(())
        } else {
            Err(TensorError::ForeignTape)
        }
    }

    /// Appends an op node. The backward rule is dropped when no input
    /// requires a gradient, which also frees anything it captured.
    pub(crate) fn push<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: F,
    ) -> Var<'_, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> InputGrads<T> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|v| nodes[v.id].value.all_finite())
        {
            panic!("{op} produced a non-finite value from finite inputs");
        }
        nodes.push(Node {
            op,
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d`loss`/d(leaf) to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.check_same(&[loss])?;
        if self.consumed.get() {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Untracked);
        }
        self.consumed.set(true);

        let mut pending: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        pending[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                if node.requires_grad {
                    leaf_grads[id] = Some(grad);
                }
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| nodes[i].requires_grad)
                    .collect(),
            };
            let input_grads = rule(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[input].value.numel(), "{}", node.op);
                match &mut pending[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(g),
                }
            }
        }
        *self.grads.borrow_mut() = leaf_grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::from_parts(shape, g.clone()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec([3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec([1], vec![2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones([2]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::AlreadyBackpropagated)
        ));
    }

    #[test]
    fn non_scalar_and_untracked_losses_are_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones([2]));
        assert!(matches!(
            tape.backward(x.exp()),
            Err(TensorError::NonScalarLoss(_))
        ));
        let c = tape.constant(Tensor::ones([2]));
        assert!(matches!(
            tape.backward(c.sum()),
            Err(TensorError::Untracked)
        ));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = sum(x + x*x) → 1 + 2x
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec([2], vec![1.0, 3.0]).unwrap());
        let loss = x.add(x.mul(x).unwrap()).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones([2]));
        let c = tape.constant(Tensor::full([2], 3.0));
        tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn foreign_tape_is_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.param(Tensor::ones([2]));
        let y = b.param(Tensor::ones([2]));
        assert!(matches!(x.add(y), Err(TensorError::ForeignTape)));
    }
}
