//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every primitive appends one node holding its
//! output value and whatever forward context its backward rule needs.
//! [`Graph::backward`] walks the nodes in reverse recording order, visiting
//! each exactly once.

pub mod conv;
pub mod gradcheck;
mod ops;

pub use conv::ConvSpec;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{BatchStats, BN_EPS};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    PermuteChannels {
        x: Var,
        perm: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Sum {
        x: Var,
    },
    ScalarFn {
        x: Var,
        grad: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::Relu { .. } => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::PermuteChannels { .. } => "permute_channels",
            Op::MatMul { .. } => "matmul",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum { .. } => "sum",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: usize,
}

/// The tape. Nodes are appended in evaluation order and never removed.
pub struct Graph {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    current_scope: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            scopes: vec![String::new()],
            current_scope: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to subsequently recorded nodes (used by FLOP summaries).
    pub fn set_scope(&mut self, scope: &str) {
        self.current_scope = match self.scopes.iter().position(|s| s == scope) {
            Some(i) => i,
            None => {
                self.scopes.push(scope.to_string());
                self.scopes.len() - 1
            }
        };
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.current_scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a single-element `root`; returns gradients of every
    /// differentiable leaf reachable from it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads, visited })
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Total FLOPs of the recorded nodes, see [`crate::model::accounting`].
    pub fn flops(&self) -> u64 {
        (0..self.nodes.len()).map(|i| self.node_flops(i)).sum()
    }

    /// FLOPs per scope label, in first-seen order.
    pub fn flops_by_scope(&self) -> Vec<(String, u64)> {
        let mut totals = vec![0u64; self.scopes.len()];
        for i in 0..self.nodes.len() {
            totals[self.nodes[i].scope] += self.node_flops(i);
        }
        self.scopes.iter().cloned().zip(totals).collect()
    }

    /// Per-primitive node counts, for diagnostics.
    pub fn op_histogram(&self) -> Vec<(&'static str, usize)> {
        let mut out: Vec<(&'static str, usize)> = Vec::new();
        for n in &self.nodes {
            let name = n.op.name();
            match out.iter_mut().find(|(k, _)| *k == name) {
                Some((_, c)) => *c += 1,
                None => out.push((name, 1)),
            }
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
