//! Dense f32 tensors on a reverse-mode differentiation graph.
//!
//! Every model and loss in this crate is expressed as operations recorded on
//! a [`Graph`]. Forward values are stored per node in creation order, which
//! is also a topological order; [`Graph::backward`] walks the record once in
//! reverse and accumulates gradients into every tensor that was registered
//! with `requires_grad`.
//!
//! Tensors are immutable once created on a graph. Separate graphs share no
//! state, so independent queries can be evaluated on separate threads.

mod ops;

pub use ops::normal_cdf;
pub(crate) use ops::Op;

use thiserror::Error;

/// Errors raised by graph construction and differentiation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("backward root must be scalar-shaped, got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

/// A dense array of f32 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, GradError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(GradError::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive",
            });
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| GradError::InvalidShape {
                op: "tensor",
                shape: shape.clone(),
                reason: "shape product overflows",
            })?;
        if numel != data.len() {
            return Err(GradError::InvalidShape {
                op: "tensor",
                shape,
                reason: "shape product does not match data length",
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Rank-0-like scalar, stored with shape `[1]`.
    pub fn scalar(x: f32) -> Self {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Tensor::new(vec![data.len()], data).unwrap()
    }

    /// Rank-2 matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, GradError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("valid shape")
    }

    /// Mark this tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer, used by optimizers between steps.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a scalar-shaped tensor.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    op: Op,
    value: Tensor,
}

/// An append-only record of tensor operations, in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Register a tensor as a graph input, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Register a differentiable parameter leaf (clones the tensor).
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut t = value.clone();
        t.requires_grad = true;
        t.grad = None;
        self.push(Op::Leaf, t)
    }

    /// Register a non-differentiable input (clones the tensor).
    pub fn constant(&mut self, value: &Tensor) -> Var {
        let mut t = value.clone();
        t.requires_grad = false;
        t.grad = None;
        self.push(Op::Leaf, t)
    }

    pub fn constant_scalar(&mut self, x: f32) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient as a tensor shaped like `v`'s value, zeros if none flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match value.grad() {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, op: Op, mut value: Tensor) -> Var {
        if !value.requires_grad {
            value.requires_grad = op
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].value.requires_grad);
        }
        value.grad = None;
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var(id)
    }

    pub(crate) fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value.data
    }

    pub(crate) fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Populate `grad` on every differentiable tensor reachable from `root`.
    ///
    /// `root` must be scalar-shaped. Gradients from multiple consumers of a
    /// node accumulate additively. Gradients from a previous backward call on
    /// the same graph are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<(), GradError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(GradError::NonScalarRoot {
                shape: self.nodes[root.0].value.shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.nodes[root.0].value.requires_grad {
            // Nothing differentiable feeds the root; all gradients are zero.
            return Ok(());
        }
        self.nodes[root.0].value.grad = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if self.nodes[id].value.grad.is_none() || !self.nodes[id].value.requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.backprop(id, &op);
        }
        Ok(())
    }

    pub(crate) fn add_grad(&mut self, v: Var, g: &[f32]) {
        let value = &mut self.nodes[v.0].value;
        if !value.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), value.numel());
        match &mut value.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => value.grad = Some(g.to_vec()),
        }
    }
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; otherwise leave them unchanged. Returns the pre-clip norm.
///
/// The norm is accumulated in f64 so the clipping decision does not depend
/// on summation order artifacts.
pub fn global_norm_clip(grads: &mut [Tensor], max_norm: f32) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm as f64 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(GradError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(GradError::InvalidShape { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, GradError::NonScalarRoot { .. }));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap().with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // root = sum(x ⊙ x) at x = [1, 2] has gradient 2x = [2, 4].
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_resets_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]).with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn clip_scales_when_above_threshold() {
        // Global norm 10 with max 5 halves every entry.
        let mut grads = vec![Tensor::vector(vec![6.0, 8.0])];
        let norm = global_norm_clip(&mut grads, 5.0);
        assert!((norm - 10.0).abs() < 1e-12);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_keeps_small_gradients() {
        let mut grads = vec![Tensor::vector(vec![3.0]), Tensor::scalar(0.0)];
        global_norm_clip(&mut grads, 5.0);
        assert_eq!(grads[0].data(), &[3.0]);
    }

    #[test]
    fn clip_boundary_is_non_strict() {
        // Norm exactly 5 with max 5 stays untouched.
        let mut grads = vec![Tensor::vector(vec![3.0, 4.0])];
        global_norm_clip(&mut grads, 5.0);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_splits_across_tensors() {
        let mut grads = vec![Tensor::vector(vec![6.0]), Tensor::vector(vec![8.0])];
        global_norm_clip(&mut grads, 5.0);
        assert_eq!(grads[0].data(), &[3.0]);
        assert_eq!(grads[1].data(), &[4.0]);
    }
}
