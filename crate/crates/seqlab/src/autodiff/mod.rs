//! Minimal reverse-mode automatic differentiation over dense row-major
//! arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] on a scalar replays the record once in reverse and
//! accumulates gradients into every reachable differentiable leaf. The op
//! set is exactly what the sequence model needs, nothing more: matmul,
//! elementwise arithmetic, bias add, GELU, layer norm, embedding lookup,
//! column slice/concat, row masking, (masked) softmax, log-softmax,
//! smoothed cross-entropy, and an escape hatch for ops with hand-written
//! adjoints ([`CustomVjp`], used by the CTC loss).
//!
//! Every op validates the finiteness of its output and fails fast on
//! NaN/Inf; self-training loops corrupt silently otherwise.

mod check;
mod ops;

pub use check::grad_check;

use crate::real::Real;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: expected {expected}, got shape {got}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: String,
    },
    #[error("{op}: axis {axis} out of range for shape {shape}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: String,
    },
    #[error("{op}: token index {index} out of vocabulary range {vocab}")]
    TokenOutOfRange {
        op: &'static str,
        index: usize,
        vocab: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("masked softmax row {row} has no allowed entries")]
    EmptyAttentionRow { row: usize },
    #[error("{op}: values length {len} does not match shape {shape}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: String,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    values: Vec<R>,
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, values: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != values.len() {
            return Err(TensorError::LengthMismatch {
                op: "tensor",
                len: values.len(),
                shape: shape_str(&shape),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: R) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![R::ZERO; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows/cols view of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn row(&self, r: usize) -> &[R] {
        let c = *self.shape.last().unwrap();
        &self.values[r * c..(r + 1) * c]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Hand-written vector-Jacobian product for ops the primitive set cannot
/// express (the CTC marginal). `backward` returns one gradient buffer per
/// input, in input order.
pub trait CustomVjp<R: Real>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor<R>], output: &Tensor<R>, out_grad: &[R]) -> Vec<Vec<R>>;
}

pub(crate) enum Op<R: Real> {
    /// Differentiable leaf (parameters).
    Leaf,
    /// Non-differentiable leaf (data, masks, position tables).
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale(Var, R),
    Sum(Var),
    SliceCols { src: Var, start: usize, len: usize },
    ConcatCols(Var, Var),
    RowMask { src: Var, keep: Vec<bool> },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: R },
    Embedding { table: Var, ids: Vec<u16> },
    LogSoftmax { x: Var, axis: usize },
    MaskedSoftmaxRows { x: Var, allowed: Vec<bool> },
    SmoothedCeRows {
        logp: Var,
        targets: Vec<u16>,
        row_weights: Vec<R>,
        eps: R,
    },
    Custom { inputs: Vec<Var>, vjp: Box<dyn CustomVjp<R>> },
}

impl<R: Real> fmt::Debug for Op<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl<R: Real> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::RowMask { .. } => "row_mask",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmaxRows { .. } => "masked_softmax",
            Op::SmoothedCeRows { .. } => "smoothed_cross_entropy",
            Op::Custom { vjp, .. } => vjp.name(),
        }
    }
}

pub(crate) struct Node<R: Real> {
    pub tensor: Tensor<R>,
    pub op: Op<R>,
}

/// Wengert list: ordered record of executed operations. Construction and
/// backward are single-threaded; values are immutable once recorded.
pub struct Tape<R: Real> {
    pub(crate) nodes: Vec<Node<R>>,
    grads: Option<Vec<Vec<R>>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<R>) -> Result<Var> {
        self.push(Tensor::new(shape, values)?, Op::Leaf)
    }

    pub fn input_tensor(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<R>) -> Result<Var> {
        self.push(Tensor::new(shape, values)?, Op::Const)
    }

    pub fn constant_tensor(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push(t, Op::Const)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].tensor
    }

    /// Gradient buffer of `v` after backward; `None` before backward.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.as_ref().map(|g| g[v.0].as_slice())
    }

    /// Drop every node recorded after the first `len`. Nodes only refer
    /// backwards, so the survivors stay valid; handles to dropped nodes
    /// must not be used again. Forward-only workflows (inference) use this
    /// to run many decoder passes over one encoding without growing the
    /// tape.
    pub fn truncate(&mut self, len: usize) {
        assert!(
            self.grads.is_none(),
            "truncate is for forward-only tapes; this one has gradients"
        );
        self.nodes.truncate(len);
    }

    /// Reverse sweep from a scalar loss. Visits each recorded op exactly
    /// once, in reverse execution order; gradients of shared subexpressions
    /// accumulate by summation. Calling twice without a fresh tape is an
    /// error; unreachable leaves keep zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape_str(loss_node.tensor.shape()),
            });
        }
        let mut grads: Vec<Vec<R>> = self
            .nodes
            .iter()
            .map(|n| vec![R::ZERO; n.tensor.numel()])
            .collect();
        grads[loss.0][0] = R::ONE;
        for i in (0..=loss.0).rev() {
            let gout = grads[i].clone();
            if gout.iter().all(|g| *g == R::ZERO) {
                continue;
            }
            ops::accumulate_input_grads(&self.nodes, i, &gout, &mut grads);
        }
        self.grads = Some(grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests;
