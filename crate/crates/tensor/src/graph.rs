use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::{Array, Scalar};

/// Backward rule of one recorded op. Receives the output gradient and a mask
/// of which parents need a gradient; returns one entry per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Array<T>, &[bool]) -> Vec<Option<Array<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Array<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A tape of recorded operations. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Array<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    pub fn leaf(&self, value: Rc<Array<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        value: Array<T>,
        parents: &[usize],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        let shape = nodes[root.id].value.shape().to_vec();
        grads[root.id] = Some(Array::full(&shape, T::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            // Interior gradients are released once propagated; leaves keep theirs.
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let contributions = rule(&g, &mask);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&p, contribution) in node.parents.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                debug_assert_eq!(c.shape(), nodes[p].value.shape(), "gradient shape");
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&c),
                    None => grads[p] = Some(c),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Array<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Array<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Array<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the tape: no gradient flows through the result.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf(self.value(), false)
    }
}
