//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional value plus an optional link
//! into the expression graph that produced it. Graphs are plain DAGs of
//! reference-counted nodes; [`Tensor::backward`] walks the graph once in
//! reverse topological order and accumulates chain-rule contributions into
//! every node that requires gradients. Values never change after
//! construction; optimizers build new leaves instead of mutating old ones.
//!
//! Graph construction and backward are single-threaded per graph. Distinct
//! graphs are independent and may live on distinct threads.

mod conv;
mod ops;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{CecError, Result};
use crate::scalar::Scalar;

/// Gradient function: receives the output gradient, returns one optional
/// gradient buffer per parent (in parent order).
type BackFn<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

pub(crate) struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    back: Option<BackFn<S>>,
}

/// Handle to one value in a differentiation graph. Cloning is cheap and
/// shares the underlying node.
pub struct Tensor<S: Scalar>(Rc<Node<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    /// Leaf tensor that does not participate in gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor that accumulates gradients (a learnable parameter).
    pub fn param(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(CecError::Dimension(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data: Rc::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            back: None,
        })))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::leaf(shape, vec![S::zero(); len], false).expect("consistent")
    }

    pub fn scalar(v: S) -> Self {
        Self::leaf(vec![1], vec![v], false).expect("consistent")
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        back: BackFn<S>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: Rc::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            back: if requires_grad { Some(back) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.0.data
    }

    /// Shared handle to the raw buffer, used by backward closures.
    pub(crate) fn data_rc(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.0.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.len() != 1 {
            return Err(CecError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Copy of the accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same data viewed under a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(CecError::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            shape,
            self.data().to_vec(),
            vec![parent],
            Box::new(move |g| vec![Some(g.to_vec())]),
        ))
    }

    /// Value copy with gradients cut: the result is a constant leaf.
    pub fn detach(&self) -> Tensor<S> {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            back: None,
        }))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Every node that requires
    /// gradients and is reachable from `self` ends up with the chain-rule
    /// sum over all paths in its `grad` buffer (accumulating on top of any
    /// gradient already present from an earlier sweep).
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(CecError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Err(CecError::Contract(
                "backward on a graph with no gradient-requiring leaves".into(),
            ));
        }

        // Iterative post-order DFS; only nodes requiring grad matter.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<*const Node<S>> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.0));
        while let Some((node, child_idx)) = stack.pop() {
            let parents = &node.0.parents;
            if child_idx < parents.len() {
                stack.push((node.clone(), child_idx + 1));
                let parent = parents[child_idx].clone();
                if parent.0.requires_grad && visited.insert(Rc::as_ptr(&parent.0)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        *self.0.grad.borrow_mut() = Some(vec![S::one()]);
        for node in order.iter().rev() {
            let Some(back) = node.0.back.as_ref() else {
                continue;
            };
            let grads = {
                let guard = node.0.grad.borrow();
                let Some(g) = guard.as_ref() else { continue };
                back(g)
            };
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(grads) {
                let Some(contrib) = contrib else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.len(), parent.len());
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

pub use ops::*;
