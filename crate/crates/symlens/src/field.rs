//! Multi-channel periodic grid states.
//!
//! A [`Field`] is the unit of data everywhere: three channels (scalar density
//! ρ, velocity components v_x and v_y) on an N×N grid, periodic in both axes.
//! Row index `i` is the y coordinate, column index `j` is the x coordinate.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Number of channels; fixed channel order (ρ, v_x, v_y).
pub const CHANNELS: usize = 3;

pub const RHO: usize = 0;
pub const VX: usize = 1;
pub const VY: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    n: usize,
    /// Flat (c, i, j) row-major storage, length 3·n².
    data: Vec<T>,
}

impl<T: Scalar> Field<T> {
    pub fn zeros(n: usize) -> Self {
        Field {
            n,
            data: vec![T::zero(); CHANNELS * n * n],
        }
    }

    pub fn from_vec(n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != CHANNELS * n * n {
            return Err(Error::shape(format!(
                "field on {n}×{n} grid wants {} values, got {}",
                CHANNELS * n * n,
                data.len()
            )));
        }
        Ok(Field { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.n + i) * self.n + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.idx(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: T) {
        let k = self.idx(c, i, j);
        self.data[k] = v;
    }

    /// One channel plane as a slice of length n².
    pub fn plane(&self, c: usize) -> &[T] {
        let nn = self.n * self.n;
        &self.data[c * nn..(c + 1) * nn]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let nn = self.n * self.n;
        &mut self.data[c * nn..(c + 1) * nn]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// L2 norm over all channels and grid points.
    pub fn norm(&self) -> T {
        crate::scalar::norm2(&self.data)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[CHANNELS, self.n, self.n], self.data.clone())
            .expect("field dimensions are consistent")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS || s[1] != s[2] {
            return Err(Error::shape(format!(
                "expected ({CHANNELS}, N, N) tensor, got {s:?}"
            )));
        }
        Field::from_vec(s[1], t.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_tensor() {
        let mut f = Field::<f64>::zeros(4);
        f.set(VX, 1, 2, 3.5);
        let t = f.to_tensor();
        assert_eq!(t.shape(), &[3, 4, 4]);
        let g = Field::from_tensor(&t).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Field::<f64>::from_vec(4, vec![0.0; 10]).is_err());
    }
}
