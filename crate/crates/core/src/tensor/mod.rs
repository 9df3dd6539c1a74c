//! Dense `[b, h, w, c]` tensors and the reverse-mode engine used to
//! differentiate the classifiers in [`crate::zoo`].
//!
//! The engine records a tape of layer applications during the forward pass
//! and replays it backwards. Graphs are static: a model is an ordered list of
//! layers, with additive residual blocks as the only branching construct.

mod autodiff;
mod kernels;
mod layer;
mod loss;

pub(crate) use autodiff::train_step;
pub use autodiff::{backward_to_input, backward_to_params, forward, logits, predict, vjp_input, ForwardOutput, ParamGrad};
pub use layer::{BatchNorm, Conv2d, Dense, Layer, LayerKind};
pub use loss::softmax_cross_entropy;

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    LengthMismatch { shape: Shape, len: usize, expected: usize },
    #[error("shape mismatch at layer `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("unknown tap `{name}`; valid layer names: {}", valid.join(", "))]
    UnknownTap { name: String, valid: Vec<String> },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("input tensor does not have requires_grad set")]
    NoGradRequested,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid layer `{layer}`: {detail}")]
    InvalidLayer { layer: String, detail: String },
}

/// Batch, height, width and channel extents of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(b: usize, h: usize, w: usize, c: usize) -> Self {
        Self { b, h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.b * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one batch entry.
    pub const fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub const fn with_batch(self, b: usize) -> Self {
        Self { b, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.b, self.h, self.w, self.c)
    }
}

/// Row-major `f32` tensor in `[b, h, w, c]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
                expected: shape.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: self.shape,
                len: grad.len(),
                expected: self.data.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    #[inline]
    pub fn index(&self, n: usize, i: usize, j: usize, k: usize) -> usize {
        let s = self.shape;
        ((n * s.h + i) * s.w + j) * s.c + k
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(n, i, j, k)]
    }

    /// Borrow batch entry `n` as a flat `h*w*c` slice.
    pub fn image(&self, n: usize) -> &[f32] {
        let len = self.shape.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copy the batch entries in `range` into a new tensor.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Tensor {
        let len = self.shape.image_len();
        let data = self.data[range.start * len..range.end * len].to_vec();
        Tensor {
            shape: self.shape.with_batch(range.len()),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Gather the listed batch entries into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.shape.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor {
            shape: self.shape.with_batch(indices.len()),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Concatenate along the batch axis. All parts must share `h, w, c`.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().map(|t| t.shape).unwrap_or(Shape::new(0, 0, 0, 0));
        let mut data = Vec::new();
        let mut b = 0;
        for t in parts {
            let s = t.shape;
            if (s.h, s.w, s.c) != (first.h, first.w, first.c) {
                return Err(TensorError::ShapeMismatch {
                    layer: "concat".into(),
                    detail: format!("{} vs {}", s, first),
                });
            }
            b += s.b;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(first.with_batch(b), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
