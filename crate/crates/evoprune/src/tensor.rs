//! Dense n-dimensional arrays in row-major order.
//!
//! All in-memory math runs in f64; the fitness path depends on the low
//! numerical noise, and training simply shares the same carrier. On-disk
//! containers store f32 (see [`crate::container`]).

use crate::{Error, Result};
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense real-valued n-dimensional array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Borrows the buffer as a `rows x cols` matrix view.
    pub fn as_mat(&self, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        debug_assert_eq!(rows * cols, self.data.len());
        ArrayView2::from_shape((rows, cols), &self.data).expect("matrix view")
    }

    pub fn as_mat_mut(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
        debug_assert_eq!(rows * cols, self.data.len());
        ArrayViewMut2::from_shape((rows, cols), &mut self.data).expect("matrix view")
    }

    /// Fails if any element is NaN or infinite. `context` names the producer.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Batch count for an `N x C x H x W` activation tensor.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// `(C, H, W)` of a 4-d activation tensor.
    pub fn chw(&self) -> Result<[usize; 3]> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected N x C x H x W, got {:?}",
                self.shape
            )));
        }
        Ok([self.shape[1], self.shape[2], self.shape[3]])
    }

    /// Elementwise maximum absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.ensure_finite("test").is_ok());
        t.data_mut()[2] = f64::NAN;
        assert!(t.ensure_finite("test").is_err());
    }

    #[test]
    fn matrix_view_is_row_major() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = t.as_mat(2, 2);
        assert_eq!(m[[0, 1]], 2.0);
        assert_eq!(m[[1, 0]], 3.0);
    }
}
