//! Tape-free reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node holding its forward value, its
//! parents and a closure mapping the output cotangent to parent cotangents.
//! Nodes whose parents need no gradient drop their closure at construction,
//! so inference builds no backward state at all.

mod nn;
mod ops;
mod sparse;

pub use nn::{BatchStats, Conv2dSpec};
pub use sparse::SparseMap;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::tensor::{Float, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    /// Leaf that accumulates a gradient.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Result of an operation on `parents`. The closure receives the output
    /// cotangent, the parents and the output value, and returns one optional
    /// cotangent per parent.
    pub fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, parents, Some(Box::new(backward)))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(self.value().len(), 1, "backward() needs a scalar output");
        self.backward_with(Tensor::full(self.shape(), T::one()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads: leaves };
        }
        let order = self.topo_order();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(f) => {
                    let parent_grads = f(&g, &node.0.parents, &node.0.value);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Gradients of leaf variables after a reverse pass.
pub struct Gradients<T: Float> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id())
    }

    /// Gradient of `v`, or zeros if `v` did not influence the output.
    pub fn wrt(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var<T>) -> Tensor<T> {
        self.grads
            .remove(&v.id())
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
