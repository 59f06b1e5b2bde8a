//! Minimal deterministic reverse-mode autodiff engine.
//!
//! A [`Tensor`] is a cheaply clonable handle to an N-dimensional `f64`
//! array. Operators record their inputs, so calling [`Tensor::backward`]
//! on a scalar output fills the `grad` buffer of every `requires_grad`
//! leaf with its exact partial derivative. One graph belongs to one
//! thread; independent graphs never share state.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

mod adam;
mod conv;
pub mod gradcheck;
mod norm;
mod ops;
mod rng;

pub use adam::{adam_step, AdamState};
pub use conv::{avgpool2d, conv2d, conv_transpose2d, maxpool2d};
pub use norm::{batch_norm_eval, batch_norm_train, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::{
    add, concat_channels, dense, dropout, mul, relu, reshape, scale, softmax_cross_entropy,
    square, sub, sum_all,
};
pub use rng::RngStream;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors raised by tensor constructors and operators.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Data buffer length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// Two operands (or an operand and a required form) disagree in shape.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operator needed a specific rank.
    BadRank {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// backward() was called on a non-scalar.
    NotScalar { elems: usize },
    /// Pooling over odd spatial extents.
    OddExtent { op: &'static str, h: usize, w: usize },
    /// Dropout probability outside `[0, 1)`.
    InvalidDropout { p: f64 },
    /// Batch norm in train mode needs at least two values per channel.
    BatchTooSmall { elems: usize },
    /// Parameter list and optimizer state disagree.
    ParamMismatch { expected: usize, got: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length mismatch: shape wants {expected}, got {got}")
            }
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} vs {rhs:?}")
            }
            TensorError::BadRank { op, expected, got } => {
                write!(f, "{op}: expected rank-{expected} tensor, got rank {got}")
            }
            TensorError::NotScalar { elems } => {
                write!(f, "backward() needs a scalar output, got {elems} elements")
            }
            TensorError::OddExtent { op, h, w } => {
                write!(f, "{op}: spatial extents must be even, got {h}x{w}")
            }
            TensorError::InvalidDropout { p } => {
                write!(f, "dropout probability must lie in [0, 1), got {p}")
            }
            TensorError::BatchTooSmall { elems } => {
                write!(f, "batch norm needs at least 2 values per channel, got {elems}")
            }
            TensorError::ParamMismatch { expected, got } => {
                write!(f, "optimizer state holds {expected} parameters, got {got}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Forward-pass mode for dropout and batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Recorded operator, holding the inputs and whatever forward context
/// the backward pass needs. `Leaf` marks constants and parameters.
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Square(Tensor),
    Scale(Tensor, f64),
    SumAll(Tensor),
    Reshape(Tensor),
    ConcatChannels(Vec<Tensor>),
    Relu(Tensor),
    /// `mask` entries are 0 (dropped) or `1/(1-p)` (kept, rescaled).
    Dropout { x: Tensor, mask: Vec<f64> },
    Dense { x: Tensor, w: Tensor, b: Tensor },
    Conv2d { x: Tensor, w: Tensor, b: Tensor },
    ConvTranspose2d { x: Tensor, w: Tensor, b: Tensor },
    /// `argmax` stores, per output element, the flat input index that won.
    MaxPool2d { x: Tensor, argmax: Vec<usize> },
    AvgPool2d(Tensor),
    /// `xhat` is the normalized input, `inv_std` the per-channel 1/sqrt(var+eps).
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// `probs` caches softmax(logits) for the gradient `w * (probs - target)`.
    SoftmaxCrossEntropy {
        logits: Tensor,
        target: Tensor,
        weights: Tensor,
        probs: Vec<f64>,
    },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(&Tensor)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(a);
                f(b);
            }
            Op::Square(x)
            | Op::Scale(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::AvgPool2d(x)
            | Op::Dropout { x, .. }
            | Op::MaxPool2d { x, .. } => f(x),
            Op::ConcatChannels(parts) => parts.iter().for_each(f),
            Op::Dense { x, w, b }
            | Op::Conv2d { x, w, b }
            | Op::ConvTranspose2d { x, w, b } => {
                f(x);
                f(w);
                f(b);
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                f(x);
                f(gamma);
                f(beta);
            }
            Op::SoftmaxCrossEntropy { logits, .. } => f(logits),
        }
    }
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    tracked: bool,
    op: Op,
}

/// Handle to a node in a gradient graph. Cloning shares the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, tracked: bool, op: Op) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = if requires_grad {
            Some(vec![0.0; data.len()])
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(grad),
                requires_grad,
                tracked,
                op,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, false, false, Op::Leaf))
    }

    /// Trainable leaf; allocates a zeroed gradient buffer.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, true, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n], false, false, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v], false, false, Op::Leaf)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, tracked: bool, op: impl FnOnce() -> Op) -> Self {
        let op = if tracked { op() } else { Op::Leaf };
        Tensor::new(shape, data, false, tracked, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn tracked(&self) -> bool {
        self.inner.tracked
    }

    fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutable view of the values. Meant for leaves (optimizer updates,
    /// finite-difference probes); mutating an interior node of a live
    /// graph invalidates any saved forward context.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Value of a scalar tensor. Panics when the tensor has more than
    /// one element; use only on outputs known to be scalar.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.inner.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients of
    /// `requires_grad` leaves accumulate until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NotScalar { elems: self.len() });
        }

        // Post-order DFS over tracked nodes, iterative to keep deep
        // graphs off the call stack.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            node.inner.op.for_each_input(|inp| {
                if inp.tracked() && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            });
        }

        let mut sink = GradSink(HashMap::new());
        sink.0.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            // A tracked node always received a gradient by the time we
            // reach it (its consumers come earlier in reverse order).
            let Some(out_grad) = sink.0.remove(&node.id()) else {
                continue;
            };
            if node.inner.requires_grad {
                let mut g = node.inner.grad.borrow_mut();
                let buf = g.as_mut().expect("requires_grad leaf has grad buffer");
                for (dst, src) in buf.iter_mut().zip(&out_grad) {
                    *dst += src;
                }
            }
            backprop(node, &out_grad, &mut sink);
        }
        Ok(())
    }
}

/// Accumulates gradients per node id during a backward sweep.
pub(crate) struct GradSink(HashMap<u64, Vec<f64>>);

impl GradSink {
    /// Gradient buffer for `t`, created zeroed on first use. Returns
    /// None for untracked inputs so ops can skip the work.
    pub(crate) fn buf(&mut self, t: &Tensor) -> Option<&mut Vec<f64>> {
        if !t.tracked() {
            return None;
        }
        Some(
            self.0
                .entry(t.id())
                .or_insert_with(|| vec![0.0; t.len()]),
        )
    }
}

fn backprop(node: &Tensor, out_grad: &[f64], sink: &mut GradSink) {
    match &node.inner.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for t in [a, b] {
                if let Some(g) = sink.buf(t) {
                    for (dst, src) in g.iter_mut().zip(out_grad) {
                        *dst += src;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = sink.buf(a) {
                for (dst, src) in g.iter_mut().zip(out_grad) {
                    *dst += src;
                }
            }
            if let Some(g) = sink.buf(b) {
                for (dst, src) in g.iter_mut().zip(out_grad) {
                    *dst -= src;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(g) = sink.buf(a) {
                let bd = b.data();
                for i in 0..g.len() {
                    g[i] += out_grad[i] * bd[i];
                }
            }
            if let Some(g) = sink.buf(b) {
                let ad = a.data();
                for i in 0..g.len() {
                    g[i] += out_grad[i] * ad[i];
                }
            }
        }
        Op::Square(x) => {
            if let Some(g) = sink.buf(x) {
                let xd = x.data();
                for i in 0..g.len() {
                    g[i] += 2.0 * xd[i] * out_grad[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(g) = sink.buf(x) {
                for (dst, src) in g.iter_mut().zip(out_grad) {
                    *dst += c * src;
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(g) = sink.buf(x) {
                let s = out_grad[0];
                g.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Reshape(x) => {
            if let Some(g) = sink.buf(x) {
                for (dst, src) in g.iter_mut().zip(out_grad) {
                    *dst += src;
                }
            }
        }
        Op::ConcatChannels(parts) => ops::concat_backward(node, parts, out_grad, sink),
        Op::Relu(x) => {
            if let Some(g) = sink.buf(x) {
                let xd = x.data();
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        g[i] += out_grad[i];
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(g) = sink.buf(x) {
                for i in 0..g.len() {
                    g[i] += out_grad[i] * mask[i];
                }
            }
        }
        Op::Dense { x, w, b } => ops::dense_backward(x, w, b, out_grad, sink),
        Op::Conv2d { x, w, b } => conv::conv2d_backward(x, w, b, out_grad, sink),
        Op::ConvTranspose2d { x, w, b } => {
            conv::conv_transpose2d_backward(x, w, b, node.shape(), out_grad, sink)
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(g) = sink.buf(x) {
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    g[in_idx] += out_grad[out_idx];
                }
            }
        }
        Op::AvgPool2d(x) => conv::avgpool2d_backward(x, node.shape(), out_grad, sink),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => norm::batch_norm_backward(x, gamma, beta, xhat, inv_std, out_grad, sink),
        Op::SoftmaxCrossEntropy {
            logits,
            target,
            weights,
            probs,
        } => ops::sce_backward(logits, target, weights, probs, out_grad, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_at_three() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = square(&x);
        y.backward().unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn relu_of_negated_input_has_zero_gradient() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = relu(&scale(&x, -1.0));
        y.backward().unwrap();
        assert_eq!(y.item(), 0.0);
        assert_eq!(x.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = square(&x);
        assert_eq!(y.backward(), Err(TensorError::NotScalar { elems: 2 }));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = square(&x);
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 12.0);
        x.zero_grad();
        assert_eq!(x.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // y = x*x + x  => dy/dx = 2x + 1
        let x = Tensor::param(&[1], vec![4.0]).unwrap();
        let y = add(&mul(&x, &x).unwrap(), &x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 9.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let c = Tensor::scalar(5.0);
        let y = mul(&x, &c).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 5.0);
        assert!(c.grad().is_none());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { expected: 6, got: 5 })
        ));
    }
}
