use super::ops::{self, LrnParams};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    AddChannel {
        x: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Tanh {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Conv2d {
        x: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Lrn {
        x: NodeId,
        params: LrnParams,
        denom: Vec<f64>,
    },
    ScaledSoftmax {
        e: NodeId,
        lambda: f64,
    },
    SumPool {
        x: NodeId,
        k: usize,
    },
    L2Normalize {
        x: NodeId,
        norm: Option<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Add { a, b } | Mul { a, b } => vec![*a, *b],
            AddRow { x, bias } | AddChannel { x, bias } => vec![*x, *bias],
            Conv2d { x, kernels, .. } => vec![*x, *kernels],
            Transpose { a }
            | Scale { a, .. }
            | Tanh { a }
            | Relu { a }
            | Sum { a }
            | Reshape { a } => {
                vec![*a]
            }
            MaxPool { x, .. }
            | Lrn { x, .. }
            | SumPool { x, .. }
            | L2Normalize { x, .. }
            | Dropout { x, .. } => {
                vec![*x]
            }
            ScaledSoftmax { e, .. } => vec![*e],
            CrossEntropy { logits, .. } => vec![*logits],
            Concat { parts } => parts.clone(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so the node list
/// is always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is kept after [`Graph::backward`] when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.grad = None;
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Clears leaf gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`, populating the gradients of
    /// every leaf created with `requires_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown node {}", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.nodes[idx].value.grad = Some(upstream);
                continue;
            }
            for (input, delta) in ops::backward(self, &node.op, &node.value, &upstream) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }
}
