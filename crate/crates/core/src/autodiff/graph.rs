use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

use super::backward::propagate;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// A recorded primitive application together with whatever the backward
/// rule needs from the forward pass.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    AddBias { x: Var, bias: Var },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<Float>, rstd: Vec<Float> },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: Float, probs: Vec<Float> },
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    Concat(Vec<Var>),
    SliceRows { x: Var, offset: usize },
    Patchify { x: Var, channels: usize, height: usize, width: usize, k: usize },
    Unpatchify { x: Var, channels: usize, height: usize, width: usize, k: usize },
    Upsample2x { x: Var, channels: usize, height: usize, width: usize },
    Sum(Var),
    Mean(Var),
    SmoothL1 { pred: Var, target: Var, weights: Option<Vec<Float>>, denom: Float },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<Float> },
    BinaryCrossEntropy { logits: Var, targets: Vec<Float>, probs: Vec<Float> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Tape of primitive applications, rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and backward is a single reverse sweep.
pub struct Graph<'p> {
    pub(crate) nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_leaves: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameter access, for primitive-level work.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_leaves: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    /// A graph that records no gradient requirements, for inference.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Self::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable leaf input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the graph. Repeated calls return the same leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&var) = self.param_leaves.get(&id) {
            return var;
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let param = store.get(id);
        let var = self.leaf(param.value.clone(), param.trainable);
        self.param_leaves.insert(id, var);
        var
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved activations are only needed when a gradient will flow.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Consumes the graph: a tape supports
    /// exactly one backward pass.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Float>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        let mut leaf_grads = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    let tensor = Tensor::new(node.value.shape().to_vec(), grad)?;
                    leaf_grads.insert(Var(idx), tensor);
                }
                _ => propagate(&self.nodes, idx, &grad, &mut grads),
            }
        }

        let mut params: Vec<(ParamId, Tensor)> = self
            .param_leaves
            .iter()
            .filter_map(|(&id, var)| leaf_grads.get(var).map(|g| (id, g.clone())))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            leaves: leaf_grads,
            params,
        })
    }
}

/// Gradients produced by one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf input, if it required one and was reachable.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .binary_search_by_key(&id, |(pid, _)| *pid)
            .ok()
            .map(|i| &self.params[i].1)
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }
}
