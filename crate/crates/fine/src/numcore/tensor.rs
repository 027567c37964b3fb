use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::{Error, Result};

use super::Scalar;

/// Stable identity of a tensor node within one process.
pub type TensorId = usize;

/// Backward closure: given (output data, upstream gradient), return one
/// gradient buffer per parent (None for parents that do not require grad).
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[S]) -> Vec<Option<Vec<S>>>>;

pub(crate) struct Node<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: RefCell<Vec<S>>,
    pub grad: RefCell<Option<Vec<S>>>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor<S>>,
    pub backward: Option<BackwardFn<S>>,
}

/// Dense row-major tensor handle. Cloning is cheap (reference-counted).
///
/// Values are immutable after the forward op that produced them; only leaf
/// data may be mutated, through [`Tensor::set_data`] (optimizer updates).
pub struct Tensor<S: Scalar> {
    pub(crate) node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &&self.node.data.borrow()[..self.numel().min(8)])
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    // ---- construction ----

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("from_vec", format!("zero dimension in {shape:?}")));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Leaf that participates in gradient computation (a parameter or input).
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        let values = t.to_vec();
        Ok(Self::leaf(t.node.shape.clone(), values, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![S::zero(); numel], false)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: S) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: vec![],
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Constant subgraph: no need to keep history.
            return Self::leaf(shape, data, false);
        }
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    // ---- accessors ----

    pub fn id(&self) -> TensorId {
        Rc::as_ptr(&self.node) as usize
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    /// Accumulated gradient of a leaf; exact zeros if backward never reached it.
    pub fn grad(&self) -> Vec<S> {
        match &*self.node.grad.borrow() {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.numel()],
        }
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = Some(vec![S::zero(); self.numel()]);
    }

    /// Overwrite leaf data in place (optimizer updates). Panics on interior nodes.
    pub fn set_data(&self, data: Vec<S>) {
        assert!(
            self.node.backward.is_none(),
            "set_data is only valid on leaf tensors"
        );
        assert_eq!(data.len(), self.numel());
        *self.node.data.borrow_mut() = data;
    }

    /// A leaf copy sharing the same values but cut off from the graph.
    pub fn detach(&self) -> Tensor<S> {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|v| v.is_finite())
    }

    // ---- backward ----

    /// Reverse-mode pass from a scalar loss. Accumulates into the `grad`
    /// buffer of every `requires_grad` leaf that the loss depends on;
    /// untouched leaves keep their current gradient (zeros if fresh).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.item().is_finite() {
            return Err(Error::NonFinite {
                op: "backward",
                details: format!("loss = {}", self.item()),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<TensorId, Vec<S>> = HashMap::new();
        grads.insert(self.id(), vec![S::one()]);

        for t in order.iter().rev() {
            let Some(grad_out) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.backward {
                None => {
                    // Leaf: accumulate into persistent grad storage.
                    if t.requires_grad() {
                        let mut slot = t.node.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(existing) => {
                                for (e, g) in existing.iter_mut().zip(grad_out.iter()) {
                                    *e = *e + *g;
                                }
                            }
                            None => *slot = Some(grad_out),
                        }
                    }
                }
                Some(back) => {
                    let out_data = t.node.data.borrow();
                    let parent_grads = back(&out_data, &grad_out);
                    drop(out_data);
                    debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                    for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        grads
                            .entry(parent.id())
                            .and_modify(|acc| {
                                for (a, g) in acc.iter_mut().zip(pg.iter()) {
                                    *a = *a + *g;
                                }
                            })
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Deterministic post-order over the grad-requiring subgraph.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<TensorId> = HashSet::new();
        // Iterative DFS: (tensor, next-child index).
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child_idx)) = stack.pop() {
            let parents = &t.node.parents;
            if child_idx < parents.len() {
                let child = parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if child.requires_grad() && !visited.contains(&child.id()) {
                    visited.insert(child.id());
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}
