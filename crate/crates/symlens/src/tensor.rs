//! Dense row-major tensors.
//!
//! Deliberately minimal: shape plus a flat buffer, with just the accessors the
//! operator vocabulary needs. No broadcasting, no views; shape agreement is
//! validated by the graph layer at construction time.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of equal length.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} values to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset of a 3D index (c, i, j).
    #[inline]
    pub fn idx3(&self, c: usize, i: usize, j: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + i) * self.shape[2] + j
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.idx3(c, i, j)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_len() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0f64; 3]).is_err());
        let t = Tensor::from_vec(&[2, 2], vec![1.0f64; 4]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn idx3_row_major() {
        let t = Tensor::<f64>::zeros(&[3, 4, 5]);
        assert_eq!(t.idx3(1, 2, 3), 1 * 20 + 2 * 5 + 3);
    }
}
