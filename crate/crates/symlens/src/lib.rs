//! Desk-scale toolkit for training small autoregressive emulators of a 2D
//! periodic flow and diagnosing whether they internalize physical symmetries.
//!
//! The pipeline has four stages:
//!
//! 1. [`pde`] generates ground-truth trajectories of viscous Burgers flow with
//!    a passively advected scalar on a periodic grid, with controllable
//!    isotropy of the initial conditions.
//! 2. [`models`] builds three emulator families (a multiscale conv net, a
//!    patch-token net, and an exactly translation-equivariant reference net)
//!    on top of the [`autodiff`] engine.
//! 3. [`train`] fits them with Adam on a channel-normalized squared error.
//! 4. [`diag`] and [`metric`] measure forward-pass equivariance error under
//!    [`symmetry`] group actions and the metric-weighted gradient influence
//!    between symmetry-related inputs, solved matrix-free in the regularized
//!    tangent-kernel metric.
//!
//! Core numerics are generic over the scalar type via [`Scalar`]; the
//! concrete instantiation used throughout the toolkit is [`Real`] (`f64`).

pub mod autodiff;
pub mod diag;
pub mod error;
pub mod field;
pub mod loss;
pub mod metric;
pub mod models;
pub mod pde;
pub mod rng;
pub mod scalar;
pub mod symmetry;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use scalar::Scalar;

/// Scalar type used by the concrete toolkit. Metric solves and influence
/// ratios are ill-conditioned in single precision, so everything user-facing
/// runs in 64-bit.
pub type Real = f64;

/// Result alias for fallible toolkit operations.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Concrete field type (3 channels on an N×N periodic grid).
pub type RealField = field::Field<Real>;
/// Concrete tensor type.
pub type RealTensor = tensor::Tensor<Real>;
/// Concrete flat parameter vector.
pub type RealParams = autodiff::ParamVector<Real>;
