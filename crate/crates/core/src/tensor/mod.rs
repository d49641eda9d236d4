//! Dense f64 arrays with a reverse-mode tape.
//!
//! [`Tensor`] is the owned storage used for parameters and data. Forward
//! passes copy tensors onto a [`Tape`] and build new values there through
//! the recorded primitives; [`Tape::backward`] then replays the records in
//! reverse to produce gradients, which are folded back into parameter
//! tensors with [`accumulate`].

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use optim::{sgd_step, Adam};
pub use tape::{accumulate, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A tensor that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive and at least one axis is required".into(),
        });
    }
    Ok(())
}
