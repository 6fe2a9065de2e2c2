//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Node ids are assigned in execution order, so
//! the tape is topologically sorted by construction and [`Tape::backward`]
//! is a single reverse sweep. A tape built with [`Tape::no_grad`] keeps only
//! values, which is what inference and the profiler use.

mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use norm::Layout;

use crate::counters;
use crate::error::{Error, Result};
use crate::kernels::{ConvGeometry, CubicTaps, GemmShape};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op maps onto the left operand's elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b` matches the trailing extents of `a`: index `i % len`.
    Suffix(usize),
    /// `b` matches the leading extents of `a`, trailing ones: index `i / inner`.
    Prefix(usize),
    /// Arbitrary numpy-style broadcast; `b_strides` are zero on broadcast axes.
    General {
        a_shape: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        shape: GemmShape,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        gamma: Var,
        layout: Layout,
        inv_norm: Vec<T>,
    },
    PNormalize {
        x: Var,
        gamma: Var,
        p: Var,
        layout: Layout,
        eps: T,
    },
    Standardize {
        x: Var,
        gamma: Var,
        groups: norm::Groups,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
    },
    Resize {
        x: Var,
        outer: usize,
        taps_h: CubicTaps,
        taps_w: CubicTaps,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Binary { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            L2Normalize { x, gamma, .. } | Standardize { x, gamma, .. } => vec![*x, *gamma],
            PNormalize { x, gamma, p, .. } => vec![*x, *gamma, *p],
            Scale { x, .. }
            | Gelu { x }
            | Sum { x }
            | Mean { x }
            | Transpose { x, .. }
            | Reshape { x }
            | Slice { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | Resize { x, .. } => vec![*x],
            Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
        }
    }
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation with values and backward rules.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates values.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Differentiable leaf (a parameter or an input being checked).
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, self.recording)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite(&value, "leaf")?;
        Ok(self.push_node(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        }))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result. `inputs` decides whether gradients flow; when
    /// none of them needs one (or the tape is not recording) the saved state
    /// is discarded.
    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        let requires_grad =
            self.recording && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_node(Node {
            value,
            requires_grad,
            op,
        }))
    }

    /// Accumulates d`loss`/d`leaf` into every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let mut acc = GradAcc {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            backward_node(node, &g, &mut acc)?;
        }
        Ok(())
    }
}

fn check_finite<T: Element>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {what}")))
    }
}

/// Gradient sink used by the backward rules.
pub(crate) struct GradAcc<'a, T: Element> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Element> GradAcc<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        debug_assert_eq!(g.numel(), self.nodes[v.0].value.numel());
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(if g.shape() == shape {
                    g
                } else {
                    g.reshape(shape).expect("gradient numel checked above")
                });
            }
        }
    }
}

fn backward_node<T: Element>(node: &Node<T>, g: &Tensor<T>, acc: &mut GradAcc<'_, T>) -> Result<()> {
    match &node.op {
        Op::Leaf => Ok(()),
        Op::MatMul { a, b, shape } => linalg::matmul_backward(*a, *b, shape, g, acc),
        Op::Conv2d { x, w, geom } => linalg::conv2d_backward(*x, *w, geom, g, acc),
        Op::Binary { kind, a, b, bcast } => elementwise::binary_backward(*kind, *a, *b, bcast, g, acc),
        Op::Scale { x, factor } => {
            acc.add(*x, g.map(|v| v * *factor));
            Ok(())
        }
        Op::Gelu { x } => elementwise::gelu_backward(*x, g, acc),
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            norm::layer_norm_backward(*x, *gamma, *beta, mean, rstd, g, acc)
        }
        Op::L2Normalize { x, gamma, layout, inv_norm } => {
            norm::l2_backward(*x, *gamma, layout, inv_norm, g, acc)
        }
        Op::PNormalize { x, gamma, p, layout, eps } => norm::pnorm_backward(*x, *gamma, *p, layout, *eps, g, acc),
        Op::Standardize { x, gamma, groups, mean, rstd } => {
            norm::standardize_backward(*x, *gamma, groups, mean, rstd, g, acc)
        }
        Op::Softmax { x, cols } => norm::softmax_backward(*x, &node.value, *cols, g, acc),
        Op::LogSoftmax { x, cols } => norm::log_softmax_backward(*x, &node.value, *cols, g, acc),
        Op::Sum { x } => {
            let s = g[0];
            let shape = acc.value(*x).shape().to_vec();
            acc.add(*x, Tensor::full(&shape, s));
            Ok(())
        }
        Op::Mean { x } => {
            let shape = acc.value(*x).shape().to_vec();
            let n = T::from_f64(shape.iter().product::<usize>() as f64);
            acc.add(*x, Tensor::full(&shape, g[0] / n));
            Ok(())
        }
        Op::Transpose { x, batch, rows, cols } => {
            acc.add(*x, shape::transpose_data(g, *batch, *cols, *rows));
            Ok(())
        }
        Op::Reshape { x } => {
            acc.add(*x, g.clone());
            Ok(())
        }
        Op::Concat { parts, outer, inner } => shape::concat_backward(parts, *outer, *inner, g, acc),
        Op::Slice { x, outer, len, inner, start } => shape::slice_backward(*x, *outer, *len, *inner, *start, g, acc),
        Op::Resize { x, outer, taps_h, taps_w } => shape::resize_backward(*x, *outer, taps_h, taps_w, g, acc),
    }
}

pub(crate) fn count_macs(macs: u64) {
    counters::add_flops(2 * macs);
}
