//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computation happens on a
//! [`Graph`]: leaves are registered with [`Graph::param`] (gradient tracked) or
//! [`Graph::constant`], every operation appends one node to the tape and
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! There is no implicit broadcasting. Operations that need to spread a bias or a
//! weight over an axis say so in their signature.

mod gradcheck;
mod graph;
mod kernels;

use std::fmt;

pub use gradcheck::{grad_check, numeric_grad};
pub use graph::{Axis, Graph, PoolMode, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardAlreadyRun,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                reason: format!("zero extent in shape {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the leading axis of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the trailing axis of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.values[row * self.shape[1] + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.values[row * cols + col] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.values.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.values[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rows `[start, start + len)` of a matrix, copied.
    pub fn row_block(&self, start: usize, len: usize) -> Self {
        let cols = self.cols();
        Self {
            shape: vec![len, cols],
            values: self.values[start * cols..(start + len) * cols].to_vec(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.values.len() <= 16 {
            write!(f, "{:?}", self.values)
        } else {
            write!(f, "{:?} ..", &self.values[..16])
        }
    }
}
