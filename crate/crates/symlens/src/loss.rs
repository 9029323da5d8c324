//! Channel-scaled mean squared error (SMSE).
//!
//! Errors in each channel are normalized by that channel's dataset RMS, so
//! the loss — and everything built on its gradients, including the metric and
//! the influence values — is dimensionless:
//!
//! `smse(p, t) = (1/(C·S)) Σ_c Σ_s (p − t)²_{c,s} / σ_c²`
//!
//! with `S` grid points per channel.

use crate::error::Error;
use crate::field::Field;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
pub struct SmseWeights<T> {
    sigma: Vec<T>,
}

impl<T: Scalar> SmseWeights<T> {
    pub fn new(sigma: Vec<T>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::config("SMSE needs at least one channel RMS"));
        }
        for (c, s) in sigma.iter().enumerate() {
            if !(*s > T::zero()) || !s.is_finite() {
                return Err(Error::config(format!(
                    "channel RMS must be positive and finite; sigma[{c}] = {s}"
                )));
            }
        }
        Ok(SmseWeights { sigma })
    }

    /// Unit weights for `c` channels (tests and synthetic probes).
    pub fn unit(c: usize) -> Self {
        SmseWeights {
            sigma: vec![T::one(); c],
        }
    }

    pub fn channels(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    fn check(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<usize> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!(
                "smse shape mismatch: {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        if pred.shape().is_empty() || pred.shape()[0] != self.sigma.len() {
            return Err(Error::shape(format!(
                "smse expects leading channel dim {}, got shape {:?}",
                self.sigma.len(),
                pred.shape()
            )));
        }
        Ok(pred.numel() / self.sigma.len())
    }

    /// Per-entry weight `w_c = 1/(C·S·σ_c²)`; the loss is `Σ w_c d²` and the
    /// metric weighting is `diag(w)`.
    pub fn entry_weight(&self, c: usize, per_channel: usize) -> T {
        let denom = T::from_f64((self.sigma.len() * per_channel) as f64);
        T::one() / (denom * self.sigma[c] * self.sigma[c])
    }

    pub fn smse(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        let per_channel = self.check(pred, target)?;
        let mut acc = T::zero();
        for c in 0..self.sigma.len() {
            let w = self.entry_weight(c, per_channel);
            let lo = c * per_channel;
            let hi = lo + per_channel;
            let mut ch = T::zero();
            for (p, t) in pred.data()[lo..hi].iter().zip(&target.data()[lo..hi]) {
                let d = *p - *t;
                ch += d * d;
            }
            acc += w * ch;
        }
        Ok(acc)
    }

    /// Gradient of the SMSE with respect to the prediction: `2·w_c·(p − t)`.
    pub fn cotangent(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
        let per_channel = self.check(pred, target)?;
        let two = T::from_f64(2.0);
        let mut out = Tensor::zeros(pred.shape());
        for c in 0..self.sigma.len() {
            let w = two * self.entry_weight(c, per_channel);
            let lo = c * per_channel;
            for k in 0..per_channel {
                out.data_mut()[lo + k] = w * (pred.data()[lo + k] - target.data()[lo + k]);
            }
        }
        Ok(out)
    }

    pub fn smse_fields(&self, pred: &Field<T>, target: &Field<T>) -> Result<T> {
        self.smse(&pred.to_tensor(), &target.to_tensor())
    }
}
