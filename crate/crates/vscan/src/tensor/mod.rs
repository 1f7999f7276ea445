//! Dense N-D tensors with reverse-mode automatic differentiation.
//!
//! The engine is a tape: every operation appends a [`Node`] to a [`Graph`],
//! and [`Graph::backward`] walks the tape in reverse, accumulating gradients
//! additively across fan-out. Tensors are addressed by [`TensorId`]; the
//! graph owns all buffers.
//!
//! The scalar type is generic over [`Scalar`] (`f32` or `f64`): training and
//! inference run in single precision, while verification code can build the
//! same graphs in double precision for finite-difference checks.

mod checkpoint;
pub mod gradcheck;
#[cfg(test)]
mod op_tests;
mod ops;
mod optim;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry, CheckpointError, EntryKind,
};
pub use ops::Bcast;
pub use optim::{Adam, Init, ParamId, ParamSet, StatId};

use thiserror::Error;

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max_s(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max_s(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_nan(self) -> bool {
        self.is_nan()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max_s(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_nan(self) -> bool {
        self.is_nan()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: input has {input} channels but weight expects {weight}")]
    ChannelMismatch {
        op: &'static str,
        input: usize,
        weight: usize,
    },
    #[error(
        "{op}: non-positive output extent for dims {dims:?} with kernel {kernel}, \
         stride {stride}, padding {padding}"
    )]
    NonPositiveExtent {
        op: &'static str,
        dims: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: unsupported stride {stride} (must be 1 or 2)")]
    BadStride { op: &'static str, stride: usize },
    #[error("backward requires a scalar loss, got {elements} elements")]
    NonScalarLoss { elements: usize },
    #[error("batch norm in train mode needs at least 2 values per channel, got {per_channel}")]
    BatchTooSmall { per_channel: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub(crate) struct Node<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub op: ops::Op<S>,
}

/// Recording tape. Nodes are appended in execution order, so index order is
/// a topological order and [`Graph::backward`] visits each node exactly once
/// in reverse.
pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    pub(crate) grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Record an input tensor. `requires_grad` marks it as a differentiation
    /// target; gradients appear after [`Graph::backward`].
    pub fn leaf(
        &mut self,
        shape: &[usize],
        data: Vec<S>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, ops::Op::Leaf))
    }

    /// Copy the current value of `id` into a fresh non-differentiable leaf,
    /// cutting it out of the gradient flow.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let shape = self.nodes[id.0].shape.clone();
        let data = self.nodes[id.0].data.clone();
        self.push(shape, data, false, ops::Op::Leaf)
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        op: ops::Op<S>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Clear all gradient buffers (the tape itself is kept).
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Fold `src`'s gradient into `dst`'s. Used when one logical parameter
    /// was bound as several leaves of the same graph and a single summed
    /// gradient is wanted.
    pub fn fold_grad(&mut self, dst: TensorId, src: TensorId) {
        if dst == src {
            return;
        }
        if let Some(extra) = self.grads[src.0].take() {
            match &mut self.grads[dst.0] {
                Some(d) => {
                    for (a, b) in d.iter_mut().zip(extra) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(extra),
            }
        }
    }

    /// Reverse-mode sweep from a scalar loss. Visits nodes in reverse
    /// topological order exactly once; fan-out gradients accumulate
    /// additively. Leaf gradients persist across calls, so running
    /// `backward` again without [`Graph::zero_grads`] accumulates into
    /// them; intermediate buffers are rebuilt per pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let numel = self.nodes[loss.0].data.len();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { elements: numel });
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, ops::Op::Leaf) {
                self.grads[i] = None;
            }
        }
        {
            let g = ops::grad_buf(&mut self.grads, loss.0, 1);
            g[0] += S::ONE;
        }
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, ops::Op::Leaf) {
                continue;
            }
            let Some(go) = self.grads[idx].take() else {
                continue;
            };
            ops::backprop(&self.nodes, &mut self.grads, idx, &go);
            self.grads[idx] = Some(go);
        }
        Ok(())
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_bad_length() {
        let mut g: Graph<f32> = Graph::new();
        assert!(g.leaf(&[2, 2], vec![1.0; 3], false).is_err());
        assert!(g.leaf(&[2, 0], vec![], false).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { elements: 2 })
        ));
    }

    #[test]
    fn double_backward_accumulates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[1], vec![3.0], true).unwrap();
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[1], vec![3.0], true).unwrap();
        let y = g.scale(x, 2.0);
        let d = g.detach(y);
        let z = g.scale(d, 5.0);
        g.backward(z).unwrap();
        assert!(g.grad(x).is_none());
        assert!(!g.requires_grad(d));
    }
}
