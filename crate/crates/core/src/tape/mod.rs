//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. `backward` replays the recorded closures in reverse, accumulating
//! gradients for every leaf that was created with `requires_grad`. Tapes are
//! rebuilt from scratch each training step; nothing is retained across steps
//! except parameter values and their exported gradients.

mod gradcheck;
pub mod kernels;
mod ops;
#[cfg(test)]
mod tests;

pub use gradcheck::{assert_grads_close, check_gradients, GradCheckReport};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<E: Scalar> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
    /// True when a gradient can reach this node from some leaf.
    pub needs_grad: bool,
    /// True for leaves whose gradient the caller wants to read back.
    pub is_leaf: bool,
    pub backward: Option<BackFn<E>>,
}

pub(crate) type BackFn<E> = Box<dyn Fn(&Graph<E>, &[E], &mut Grads<E>) + Send>;

/// The recorded forward graph; backward closures read node data through it.
pub struct Graph<E: Scalar> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Scalar> Graph<E> {
    pub(crate) fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }
    pub(crate) fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }
}

/// Per-backward-pass gradient buffers, indexed by node id.
pub struct Grads<E: Scalar> {
    bufs: Vec<Option<Vec<E>>>,
    lens: Vec<usize>,
}

impl<E: Scalar> Grads<E> {
    fn new(lens: Vec<usize>) -> Self {
        Grads {
            bufs: lens.iter().map(|_| None).collect(),
            lens,
        }
    }

    /// Mutable gradient buffer for node `v`, zero-initialized on first touch.
    pub fn buf_mut(&mut self, v: Var) -> &mut [E] {
        let slot = &mut self.bufs[v.0];
        if slot.is_none() {
            *slot = Some(vec![E::zero(); self.lens[v.0]]);
        }
        slot.as_mut().unwrap()
    }

    pub fn accumulate(&mut self, v: Var, contrib: &[E]) {
        let buf = self.buf_mut(v);
        debug_assert_eq!(buf.len(), contrib.len());
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b = *b + *c;
        }
    }

    fn take(&mut self, v: Var) -> Option<Vec<E>> {
        self.bufs[v.0].take()
    }
}

pub struct Tape<E: Scalar> {
    pub(crate) graph: Graph<E>,
    /// Accumulated leaf gradients; persists across repeated `backward` calls
    /// so two passes double the gradient exactly.
    leaf_grads: HashMap<usize, Vec<E>>,
    /// Parameters leafed onto this tape, for gradient export.
    param_leaves: Vec<(ParamId, Var)>,
    param_cache: HashMap<usize, Var>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            graph: Graph { nodes: Vec::new() },
            leaf_grads: HashMap::new(),
            param_leaves: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<E>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced at node {} (shape {:?})",
            self.graph.nodes.len(),
            shape
        );
        let id = self.graph.nodes.len();
        self.graph.nodes.push(Node {
            data,
            shape,
            needs_grad,
            is_leaf: false,
            backward: None,
        });
        Var(id)
    }

    pub(crate) fn set_backward(&mut self, v: Var, f: BackFn<E>) {
        self.graph.nodes[v.0].backward = Some(f);
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.graph.nodes[v.0].needs_grad
    }

    pub fn data(&self, v: Var) -> &[E] {
        self.graph.data(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.graph.shape(v)
    }

    /// First element, for scalar-shaped nodes.
    pub fn scalar_value(&self, v: Var) -> E {
        self.graph.data(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.data(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Record a differentiation leaf.
    pub fn leaf(&mut self, tensor: &Tensor<E>) -> Var {
        let v = self.push(
            tensor.shape.clone(),
            tensor.data.clone(),
            tensor.requires_grad,
        );
        self.graph.nodes[v.0].is_leaf = tensor.requires_grad;
        v
    }

    pub fn leaf_data(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Var {
        let v = self.push(shape, data, requires_grad);
        self.graph.nodes[v.0].is_leaf = requires_grad;
        v
    }

    /// Record a constant (never receives gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> Var {
        self.push(shape, data, false)
    }

    pub fn scalar_const(&mut self, value: E) -> Var {
        self.push(vec![1], vec![value], false)
    }

    /// Leaf a parameter onto the tape (cached: one node per parameter per
    /// tape, so repeated uses accumulate onto a single gradient).
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        self.param_impl(store, id, false)
    }

    /// Leaf a parameter with its gradient frozen: values participate in the
    /// forward pass and gradient still flows *through* downstream ops, but
    /// nothing is ever accumulated for the parameter itself.
    pub fn param_frozen(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        self.param_impl(store, id, true)
    }

    fn param_impl(&mut self, store: &ParamStore<E>, id: ParamId, frozen: bool) -> Var {
        if let Some(&v) = self.param_cache.get(&id.0) {
            let leafed_frozen = !self.graph.nodes[v.0].is_leaf;
            assert_eq!(
                leafed_frozen, frozen,
                "parameter leafed both frozen and unfrozen on one tape"
            );
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.shape.clone(), p.value.data.clone(), !frozen);
        self.graph.nodes[v.0].is_leaf = !frozen;
        if !frozen {
            self.param_leaves.push((id, v));
        }
        self.param_cache.insert(id.0, v);
        v
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate into the
    /// tape; repeated calls add another full contribution.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let lens: Vec<usize> = self.graph.nodes.iter().map(|n| n.data.len()).collect();
        let mut grads = Grads::new(lens);
        grads.accumulate(loss, &[E::one()]);
        for id in (0..=loss.0).rev() {
            if !self.graph.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads.take(Var(id)) else {
                continue;
            };
            if let Some(back) = &self.graph.nodes[id].backward {
                back(&self.graph, &gout, &mut grads);
            }
            if self.graph.nodes[id].is_leaf {
                let slot = self
                    .leaf_grads
                    .entry(id)
                    .or_insert_with(|| vec![E::zero(); gout.len()]);
                for (s, g) in slot.iter_mut().zip(&gout) {
                    *s = *s + *g;
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf; zeros if the loss never reached it.
    pub fn grad_of(&self, v: Var) -> Vec<E> {
        self.leaf_grads
            .get(&v.0)
            .cloned()
            .unwrap_or_else(|| vec![E::zero(); self.graph.nodes[v.0].data.len()])
    }

    /// Add every leafed parameter's accumulated gradient into `store`.
    pub fn export_grads(&self, store: &mut ParamStore<E>) -> Result<()> {
        for &(pid, var) in &self.param_leaves {
            if let Some(g) = self.leaf_grads.get(&var.0) {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }
}
