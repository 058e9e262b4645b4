//! Dense row-major tensors of 64-bit reals.
//!
//! `Tensor` is the universal value type of the crate: images, activations,
//! parameters and gradients are all tensors. Layout is row-major with
//! channels-first conventions for 4-D data (`[N, C, H, W]`).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                msg: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape: shape.to_vec(),
                msg: "zero extent".into(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot view {} elements as {:?}", self.data.len(), shape),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine with an identically shaped tensor.
    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(op, &self.shape, &other.shape)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Strides of the row-major layout.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Extents of a 4-D tensor as `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape.clone(),
                msg: "expected a 4-D tensor [N,C,H,W]".into(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: self.shape.clone(),
                msg: "expected a 2-D tensor [H,W]".into(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Checks two shapes elementwise, naming the first offending axis.
pub fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidShape {
            op,
            shape: b.to_vec(),
            msg: format!("rank {} vs {}", a.len(), b.len()),
        });
    }
    for (axis, (&da, &db)) in a.iter().zip(b).enumerate() {
        if da != db {
            return Err(Error::AxisMismatch { op, axis, left: da, right: db });
        }
    }
    Ok(())
}
