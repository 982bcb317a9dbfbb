//! Reverse-mode autodiff tape.
//!
//! Every backward rule is expressed through the same tape primitives, so the
//! graph produced by [`Tape::grad`] is itself differentiable. That property is
//! what lets a loss containing an input gradient (a gradient penalty) be
//! trained by a second backward pass.

use crate::ops::Op;
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::cell::{Ref, RefCell};

pub(crate) struct Node<S: Scalar> {
    pub value: ArrayD<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
}

/// Arena of computation nodes. One tape per training step is the intended
/// usage; parameters enter as leaves and the whole graph is dropped with it.
pub struct Tape<S: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<S>>>,
}

/// Cheap handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: ArrayD<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Insert a leaf that gradients do not flow into.
    pub fn constant(&self, value: ArrayD<S>) -> Var<'_, S> {
        self.push(standardize(value), Op::Leaf, false)
    }

    /// Insert a leaf that participates in differentiation.
    pub fn trainable(&self, value: ArrayD<S>) -> Var<'_, S> {
        self.push(standardize(value), Op::Leaf, true)
    }

    /// Scalar constant as a 0-d array.
    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Mark an existing node so gradients with respect to it are tracked.
    ///
    /// Must be called before building the operations whose gradient is wanted
    /// (requires-grad flags are decided at node creation).
    pub fn watch(&self, var: Var<'_, S>) {
        self.nodes.borrow_mut()[var.id].requires_grad = true;
    }

    /// Gradients of a scalar `output` with respect to each entry of `wrt`.
    ///
    /// The returned gradients are tape nodes, so they can be combined into new
    /// expressions and differentiated again. Entries are `None` when `output`
    /// does not depend on the corresponding variable.
    pub fn grad<'t>(&'t self, output: Var<'t, S>, wrt: &[Var<'t, S>]) -> Vec<Option<Var<'t, S>>> {
        assert_eq!(
            output.numel(),
            1,
            "grad: output must be a scalar, got shape {:?}",
            output.shape()
        );
        let frontier = output.id + 1;
        let mut grads: Vec<Option<Var<'t, S>>> = vec![None; frontier];
        let seed = ArrayD::from_elem(IxDyn(&output.shape()), S::one());
        grads[output.id] = Some(self.constant(seed));

        for id in (0..frontier).rev() {
            let Some(grad) = grads[id] else { continue };
            let (op, any_parent_needs) = {
                let nodes = self.nodes.borrow();
                let op = nodes[id].op.clone();
                let needs = op
                    .parents()
                    .iter()
                    .any(|&p| nodes[p].requires_grad);
                (op, needs)
            };
            if !any_parent_needs {
                continue;
            }
            let out_var = Var { tape: self, id };
            for (parent, contribution) in op.backward(self, out_var, grad) {
                let parent_requires = self.nodes.borrow()[parent].requires_grad;
                if !parent_requires {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc.add(contribution),
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|v| if v.id < frontier { grads[v.id] } else { None })
            .collect()
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub(crate) fn op_parents(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].op.parents()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Clone of the node's value.
    pub fn value(self) -> ArrayD<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Run `f` against the node's value without cloning it.
    pub fn with_value<R>(self, f: impl FnOnce(&ArrayD<S>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    /// Value of a single-element node as a plain scalar.
    pub fn item(self) -> S {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item: node is not a scalar");
        *v.iter().next().unwrap()
    }

    pub(crate) fn parent_value(self, parent: usize) -> Ref<'t, ArrayD<S>> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[parent].value)
    }
}

pub(crate) fn standardize<S: Scalar>(arr: ArrayD<S>) -> ArrayD<S> {
    if arr.is_standard_layout() {
        arr
    } else {
        arr.as_standard_layout().to_owned()
    }
}

/// Reshape helper that assumes (and preserves) standard layout.
pub(crate) fn reshape_std<S: Scalar>(arr: ArrayD<S>, dims: &[usize]) -> ArrayD<S> {
    let arr = standardize(arr);
    let (data, offset) = arr.into_raw_vec_and_offset();
    debug_assert_eq!(offset.unwrap_or(0), 0);
    ArrayD::from_shape_vec(IxDyn(dims), data).expect("reshape: element count mismatch")
}
