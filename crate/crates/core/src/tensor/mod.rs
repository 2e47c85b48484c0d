//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values live in two places: [`Tensor`] owns persistent state (model
//! parameters, their accumulated gradients), while a [`Tape`] records one
//! forward pass. Parameters are bound onto a tape with [`Tape::param`],
//! the loss is differentiated with [`Tape::backward`], and gradients are
//! written back with [`Tape::accumulate_grad`].

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use tape::{Tape, UnaryOp, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: input {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("non-finite value produced by {op} at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // Branch-free scan per chunk; the exact index is only located on failure.
    let clean = data
        .chunks(64)
        .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()));
    if clean {
        return Ok(());
    }
    let index = data.iter().position(|v| !v.is_finite()).expect("non-finite value exists");
    Err(TensorError::NonFinite { op, index })
}

/// Persistent dense tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::new",
                detail: format!(
                    "shape {:?} holds {} values but {} were given",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        check_finite("Tensor::new", &data)?;
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor.
    pub fn parameter(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replace the values, keeping shape and gradient state.
    pub fn assign(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "Tensor::assign",
                detail: format!("expected {} values, got {}", self.data.len(), data.len()),
            });
        }
        check_finite("Tensor::assign", data)?;
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn add_grad(&mut self, g: &[f64]) {
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub(crate) fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], Option<&mut Vec<f64>>) {
        (&mut self.data, self.grad.as_mut())
    }
}
