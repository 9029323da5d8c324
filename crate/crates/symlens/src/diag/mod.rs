//! Diagnostics: forward-pass equivariance error, quantile summaries, sweep
//! orchestration and report rendering.

pub mod svg;
pub mod sweep;

use crate::field::Field;
use crate::loss::SmseWeights;
use crate::models::ModelInstance;
use crate::scalar::Scalar;
use crate::symmetry::{apply, GroupElement};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Type-7 (linear interpolation) quantile of an unsorted sample.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN samples"));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Median and interquartile range of a sample, plus bookkeeping for values
/// that were excluded upstream (degenerate denominators, non-converged
/// solves).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub count: usize,
    pub excluded: usize,
}

impl SummaryStats {
    pub fn from_samples(values: &[f64], excluded: usize) -> Option<SummaryStats> {
        if values.is_empty() {
            return None;
        }
        Some(SummaryStats {
            median: quantile(values, 0.5),
            q1: quantile(values, 0.25),
            q3: quantile(values, 0.75),
            count: values.len(),
            excluded,
        })
    }
}

/// Relative SMSE under a group action for one transition.
#[derive(Debug, Clone)]
pub struct EquivRecord {
    pub example: usize,
    pub element: String,
    pub smse_base: f64,
    pub smse_transformed: f64,
    /// `None` when the base SMSE is degenerate (≤ 1e-30); the example is
    /// excluded from summaries but still reported.
    pub ratio: Option<f64>,
}

/// `smse(f(g·x), g·y) / smse(f(x), y)`; unity means the model commutes with
/// `g` on this example.
pub fn equivariance_error<T: Scalar>(
    model: &ModelInstance<T>,
    weights: &SmseWeights<T>,
    g: GroupElement,
    example: usize,
    input: &Field<T>,
    target: &Field<T>,
) -> Result<EquivRecord> {
    let base = weights
        .smse_fields(&model.predict(input)?, target)?
        .to_f64();
    let gx = apply(g, input)?;
    let gy = apply(g, target)?;
    let transformed = weights
        .smse_fields(&model.predict(&gx)?, &gy)?
        .to_f64();
    let ratio = if base >= 1e-30 {
        Some(transformed / base)
    } else {
        None
    };
    Ok(EquivRecord {
        example,
        element: g.name(),
        smse_base: base,
        smse_transformed: transformed,
        ratio,
    })
}
