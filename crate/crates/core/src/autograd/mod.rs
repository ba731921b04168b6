//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records every operation of one forward pass. Each recorded node
//! keeps its value and, when any ancestor requires a gradient, a closure that
//! maps the upstream gradient to gradients for its parents. Nodes that only
//! depend on constants (for example the frozen patch embedding applied to an
//! input image) never store a closure, so frozen computation costs nothing on
//! the backward pass.
//!
//! All node values are kept in standard (row-major, contiguous) layout; the
//! ops rely on that to reshape freely.

mod ops;
mod spatial;

pub(crate) use spatial::resize_raw;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Upstream gradient, parent values, own value, which parents need a gradient.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = standard(value);
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Returns a scalar node's value.
    pub fn item(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on a non-scalar of shape {:?}", t.shape());
        t.iter().copied().next().unwrap_or(0.0)
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let value = standard(value);
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let root = &self.nodes[loss.0];
        assert_eq!(
            root.value.len(),
            1,
            "backward() needs a scalar, got shape {:?}",
            root.value.shape()
        );
        grads[loss.0] = Some(ArrayD::ones(root.value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&g, &parent_values, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(standard(pg)),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`]. Only leaves keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}
