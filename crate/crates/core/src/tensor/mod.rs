//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns its elements in row-major order. Tensors that are not
//! attached to a [`Tape`] are plain immutable values; differentiable
//! computation happens by pushing tensors onto a tape and composing ops on
//! [`Var`] handles. Everything is 64-bit: the engine exists to pass tight
//! gradient checks, not to be fast on big models.

mod kernels;
mod tape;

pub use kernels::{gelu, gelu_grad};
pub use tape::{CustomOp, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("element count {count} does not match shape {shape:?}")]
    ElementCount { count: usize, shape: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ElementCount {
                count: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D tensor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ElementCount {
                count: self.data.len(),
                shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    // ── plain (tape-free) math, used by merge paths and test oracles ──

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, k2, n) = matmul_dims("matmul", &self.shape, &other.shape)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Tensor::new(vec![m, n], kernels::matmul(&self.data, &other.data, m, k, n))
    }

    pub fn kron(&self, other: &Tensor) -> Result<Tensor> {
        let (m, n) = rank2("kron", &self.shape)?;
        let (p, q) = rank2("kron", &other.shape)?;
        Tensor::new(
            vec![m * p, n * q],
            kernels::kron(&self.data, &other.data, m, n, p, q),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = rank2("transpose", &self.shape)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1]))
}

fn matmul_dims(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<(usize, usize, usize, usize)> {
    let (m, k) = rank2(op, lhs)?;
    let (k2, n) = rank2(op, rhs)?;
    Ok((m, k, k2, n))
}

/// Central-difference gradient estimate of a scalar-valued function.
///
/// Independent of the tape: it only re-evaluates `f`, so it serves as the
/// oracle that `Tape::backward` is checked against.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad: h must be positive");
    let coords: Vec<usize> = (0..x.numel()).collect();
    let grad = finite_diff_grad_at(f, x, h, &coords);
    let mut out = Tensor::zeros(x.shape().to_vec());
    out.data_mut().copy_from_slice(&grad);
    out
}

/// Central differences on a subset of coordinates (for big parameter blocks).
pub fn finite_diff_grad_at(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    assert!(h > 0.0, "finite_diff_grad: h must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}
