//! Minimal reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Tape`] records the forward computation as an append-only list of
//! nodes; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients into every parameter leaf. All arithmetic is f64.
//!
//! The op set is exactly what the training paths need: elementwise maps,
//! dense/conv layers, batch norm, pooling, block-grid image fusion, and
//! the prototype/softmax episode loss.

pub mod conv;
pub mod norm;
mod ops;

pub use conv::conv_out_size;
pub use norm::BatchStats;

use ndarray::{ArrayD, IxDyn};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Parent {
    id: usize,
    backward: BackwardFn,
}

struct Node {
    value: Rc<ArrayD<f64>>,
    requires_grad: bool,
    parents: Vec<Parent>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if any path reached it.
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, falling back to zeros of the given shape.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> ArrayD<f64> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(shape)))
    }
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, requires_grad: bool, parents: Vec<Parent>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
        });
        Var { id }
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, Vec::new())
    }

    /// Leaf that accumulates gradients (a trainable parameter).
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, Vec::new())
    }

    pub fn value(&self, var: Var) -> &ArrayD<f64> {
        &self.nodes[var.id].value
    }

    pub(crate) fn value_rc(&self, var: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[var.id].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    /// Register an op node. Parent closures map the node's output gradient
    /// to that parent's gradient contribution; closures for parents that
    /// cannot receive gradients are dropped here.
    pub(crate) fn op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<(Var, BackwardFn)>,
    ) -> Var {
        let requires_grad = parents
            .iter()
            .any(|(v, _)| self.nodes[v.id].requires_grad);
        let kept = if requires_grad {
            parents
                .into_iter()
                .filter(|(v, _)| self.nodes[v.id].requires_grad)
                .map(|(v, backward)| Parent { id: v.id, backward })
                .collect()
        } else {
            Vec::new()
        };
        self.push(value, requires_grad, kept)
    }

    /// Reverse pass from a scalar root. Nodes created after `root` are
    /// ignored; gradient accumulation is in reverse creation order, so the
    /// result is deterministic.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.id] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            for parent in &node.parents {
                let contribution = (parent.backward)(&grad);
                match &mut grads[parent.id] {
                    Some(acc) => *acc += &contribution,
                    slot @ None => *slot = Some(contribution),
                }
            }
            if node.requires_grad && node.parents.is_empty() {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}
