//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

/// A dense tensor of 64-bit floats in row-major order.
///
/// The invariant `shape.iter().product() == data.len()` holds for every
/// constructed value, and every op in this crate treats NaN/Inf in a result
/// as an error state rather than letting it propagate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: format!(
                    "shape {:?} wants {} values, got {}",
                    shape,
                    expect,
                    data.len()
                ),
            });
        }
        let t = Tensor { shape, data };
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Construct without the finiteness check; op code calls this and lets
    /// the graph's forward pass act as the single NaN/Inf gate.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// A 1x1 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// A 1xn row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    /// An mxn matrix from nested rows; every row must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                details: "ragged rows".into(),
            });
        }
        Tensor::new(vec![m, n], rows.concat())
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
        self.data.len() == 1
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// In-place `self += factor * other` over the flat data.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// In-place `self *= factor`.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_contract_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn norm_and_dot() {
        let t = Tensor::row(vec![3.0, 4.0]);
        assert_eq!(t.l2_norm(), 5.0);
        let u = Tensor::row(vec![1.0, 2.0]);
        assert_eq!(t.dot(&u), 11.0);
    }
}
