use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Maps the upstream gradient to one gradient per parent. The mask says which
/// parents need one; entries for the others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<NodeId>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, so parents always precede children and
/// a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| {
            debug_assert!(std::ptr::eq(p.tape, self), "parent from another tape");
            nodes[p.id].requires_grad
        });
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradient of the scalar `root` with respect to every node recorded
    /// before it.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !std::ptr::eq(root.tape, self) || root.id >= nodes.len() {
            return Err(Error::RootNotOnTape);
        }
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::RootNotScalar(root_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(root_value.shape()));
        let mut mask = Vec::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(upstream) = upper[0].as_ref() else {
                continue;
            };
            mask.clear();
            mask.extend(node.parents.iter().map(|&p| nodes[p].requires_grad));
            let parent_grads = backward(upstream, &mask);
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut lower[p] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Result of [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
