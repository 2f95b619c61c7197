//! Nonparametric drift estimation for stochastic differential equations
//! driven by Brownian motion and symmetric α-stable Lévy noise,
//!
//! `dX_t = g(X_t) dt + σ(X_t) dB_t + dL_t^α`.
//!
//! The drift is split as `g = r + f` with `r` known. The unknown part is
//! written as `f = A ∇ψ`, where the potential ψ minimises a data-averaged
//! functional of the stationary Fokker–Planck adjoint operator, regularised
//! in the reproducing kernel space of a squared-exponential kernel. The
//! nonlocal part of the operator is evaluated by [`singular_quadrature`].
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`levy_noise`] | stable variates, jump-measure constant and density |
//! | [`sde_sim`] | Euler–Maruyama paths and the trajectory CSV format |
//! | [`kernel`] | SE kernel and its derivative combinations |
//! | [`singular_quadrature`] | jump integrals against `ν_α` |
//! | [`estimator`] | the kernel estimator, a parametric baseline and error metrics |
//! | [`experiment`] | the simulate → fit → evaluate grid with CSV reports |

pub mod error;
pub mod estimator;
pub mod experiment;
pub mod fields;
pub mod kernel;
pub mod levy_noise;
mod linalg;
pub mod points;
pub mod sde_sim;
pub mod singular_quadrature;

pub use error::{Error, Result};
pub use estimator::{EstimatorConfig, FittedEstimator};
pub use fields::{MatrixField, VectorField};
pub use kernel::KernelParams;
pub use levy_noise::StableParams;
pub use points::PointSet;
pub use sde_sim::{SdeModel, Trajectory};
