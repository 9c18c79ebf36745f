//! Dense tensors, the layer kernels the classifier needs, and a tape for
//! reverse-mode differentiation.

mod graph;
pub mod kernels;

pub use graph::{softmax_rows, BatchNormMode, BatchStats, Gradients, Graph, Var, FOCAL_CLAMP};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} ({phase})")]
    NonFinite { op: &'static str, phase: &'static str },
    #[error("loss must be a finite scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("batch norm evaluated before any running statistics were accumulated")]
    NoRunningStats,
}

/// Row-major tensor of `f64` values. Volumes use the layout `(N, C, H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(NnError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} with {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::Shape { op: "reshape", detail: format!("{:?} -> {shape:?}", self.shape) });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, C, H, W, D)` of a rank-5 tensor.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5], NnError> {
        match self.shape[..] {
            [n, c, h, w, d] => Ok([n, c, h, w, d]),
            _ => Err(NnError::Shape { op, detail: format!("expected rank 5, got {:?}", self.shape) }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2], NnError> {
        match self.shape[..] {
            [n, k] => Ok([n, k]),
            _ => Err(NnError::Shape { op, detail: format!("expected rank 2, got {:?}", self.shape) }),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
