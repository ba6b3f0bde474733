//! Dense row-major tensors. Shape checking happens at construction; the
//! product of extents always equals the data length.

use super::element::Element;
use crate::error::{HsaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Element> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HsaError::InvalidArgument {
                op: "tensor_new",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![F::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: F) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HsaError::InvalidArgument {
                op: "tensor_from_rows",
                msg: "ragged rows".into(),
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Number of rows when viewed as 2-D (trailing extents folded into columns).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[0]
        }
    }

    /// Number of columns when viewed as 2-D.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(HsaError::InvalidArgument {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Cast element type (f32 <-> f64) through f64.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.as_f64())).collect(),
        }
    }

    /// Euclidean norm of all elements, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
    }
}

/// Max relative error between two equally shaped tensors, with the
/// denominator floored at `floor` (elementwise `|a-b| / max(|a|,|b|,floor)`).
pub fn max_rel_err<F: Element>(a: &Tensor<F>, b: &Tensor<F>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
