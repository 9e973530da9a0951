use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

/// Adjoint rule of one recorded operation.
pub(crate) trait Backward<T: Scalar>: Send {
    fn inputs(&self) -> &[NodeId];

    /// Adds the contribution of `grad` (the adjoint of the op's output) to the
    /// adjoints of the op's inputs.
    fn backward(&self, nodes: &Nodes<'_, T>, grad: &[T], sink: &mut GradSink<T>);
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
}

/// Read access to recorded values while adjoints are replayed.
pub(crate) struct Nodes<'a, T>(&'a [Node<T>]);

impl<T: Scalar> Nodes<'_, T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.0[id].value
    }
}

/// Lazily allocated adjoint buffers.
pub(crate) struct GradSink<T> {
    adjoints: Vec<Option<Vec<T>>>,
    wanted: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Scalar> GradSink<T> {
    pub fn wants(&self, id: NodeId) -> bool {
        self.wanted[id]
    }

    /// Mutable adjoint buffer for `id`, zero-initialized on first touch.
    pub fn buf(&mut self, id: NodeId) -> &mut [T] {
        let len = self.lens[id];
        self.adjoints[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn add(&mut self, id: NodeId, grad: &[T]) {
        if !self.wants(id) {
            return;
        }
        match &mut self.adjoints[id] {
            Some(buf) => buf.iter_mut().zip(grad).for_each(|(b, &g)| *b = *b + g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }
}

/// Summary of one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardReport {
    /// Recorded operations in the order their adjoints were replayed.
    pub visited: Vec<NodeId>,
}

/// Records operations for reverse-mode differentiation.
///
/// Values are owned by the tape; [`Var`] handles index into it. A tape is
/// meant to live for one forward/backward pass and is then cleared or
/// dropped.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_leaves: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_leaves: HashMap::new(),
        }
    }

    /// A tape that keeps values but records no adjoints (inference).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value, adjoint rule and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.param_leaves.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
            op: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Places a stored parameter on the tape. Repeated requests for the same
    /// parameter return the same leaf so shared weights accumulate once.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.nodes[v.0].param = Some(id);
        self.param_leaves.insert(id, v);
        v
    }

    /// Copy of `v` with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an op output. `op` is dropped when no input needs a gradient.
    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Box<dyn Backward<T>>) -> Var {
        let needs_grad = self.grad_enabled && op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            requires_grad: false,
            grad: None,
            op: needs_grad.then_some(op),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Replays adjoints from a scalar `loss` in reverse execution order and
    /// accumulates (`+=`) into the gradients of every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", node.value.shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut sink = GradSink {
            adjoints: vec![None; n],
            wanted: self.nodes[..n].iter().map(|nd| nd.needs_grad).collect(),
            lens: self.nodes[..n].iter().map(|nd| nd.value.len()).collect(),
        };
        let mut visited = Vec::new();
        let mut leaf_grads = Vec::new();
        if sink.wants(loss.0) {
            sink.add(loss.0, &[T::one()]);
        }
        let nodes = Nodes(&self.nodes[..n]);
        for id in (0..n).rev() {
            let Some(grad) = sink.adjoints[id].take() else {
                continue;
            };
            let node = &nodes.0[id];
            if let Some(op) = &node.op {
                op.backward(&nodes, &grad, &mut sink);
                visited.push(id);
            } else if node.requires_grad {
                leaf_grads.push((id, grad));
            }
        }
        for (id, grad) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&grad)
                    .for_each(|(a, &g)| *a = *a + g),
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), grad)?);
                }
            }
        }
        // Leaves off the path still report an all-zero gradient.
        for node in self.nodes.iter_mut().filter(|nd| nd.requires_grad && nd.grad.is_none()) {
            node.grad = Some(Tensor::zeros(node.value.shape()));
        }
        Ok(BackwardReport { visited })
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.param, &node.grad) {
                store.accumulate_grad(id, grad.data());
            }
        }
    }

    /// Leaf gradients for parameters, keyed by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|nd| Some((nd.param?, nd.grad.as_ref()?)))
            .collect()
    }
}
