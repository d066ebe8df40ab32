//! Dense row-major `f64` tensors.
//!
//! Storage is reference counted so that clones (and reshapes) are cheap;
//! writes go through [`Tensor::data_mut`], which copies on write when the
//! buffer is shared.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(f).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Same data, new shape. Shares the underlying buffer.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.contains(&0) || numel_of(&shape) != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape())?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest magnitude; NaN if any element is NaN.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0, |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v.abs()) })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m: f64, (a, b)| {
                let d = (a - b).abs();
                if d.is_nan() || m.is_nan() {
                    f64::NAN
                } else {
                    m.max(d)
                }
            }))
    }

    pub(crate) fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Bitwise equality of shape and payload (distinguishes `0.0` and `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
