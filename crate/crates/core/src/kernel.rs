//! Squared-exponential kernel `K(x,x') = s² exp(-‖x-x'‖² / 2ℓ²)` and the
//! derivative combinations used by the estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointSet;

/// Lengthscale ℓ and variance s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub variance: f64,
}

impl KernelParams {
    pub fn new(lengthscale: f64, variance: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::domain(
                "lengthscale",
                format!("must be positive, got {lengthscale}"),
            ));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::domain(
                "variance",
                format!("must be positive, got {variance}"),
            ));
        }
        Ok(Self {
            lengthscale,
            variance,
        })
    }

    /// `p`-th derivative of the profile `κ(t) = s² exp(-t²/2ℓ²)`,
    /// `κ^{(p)}(t) = (-1)^p ℓ^{-p} He_p(t/ℓ) κ(t)` with `He_p` the
    /// probabilists' Hermite polynomials.
    pub fn profile_derivative(&self, order: usize, t: f64) -> f64 {
        let l = self.lengthscale;
        let u = t / l;
        let base = self.variance * (-0.5 * u * u).exp();
        base * hermite_factor(order, u, l)
    }
}

/// `(-1)^p ℓ^{-p} He_p(u)`.
#[inline]
pub(crate) fn hermite_factor(order: usize, u: f64, l: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, u);
    let he = match order {
        0 => 1.0,
        _ => {
            for p in 1..order {
                let next = u * cur - p as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    };
    let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * he / l.powi(order as i32)
}

fn sq_dist(x: &[f64], xp: &[f64]) -> f64 {
    x.iter().zip(xp).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn k_eval(x: &[f64], xp: &[f64], params: &KernelParams) -> f64 {
    let l2 = params.lengthscale * params.lengthscale;
    params.variance * (-sq_dist(x, xp) / (2.0 * l2)).exp()
}

/// All kernel quantities needed for one `(x, x')` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDerivatives {
    pub k: f64,
    /// ∇_x K
    pub grad_x: DVector<f64>,
    /// ∇_{x'} K
    pub grad_xp: DVector<f64>,
    /// ∇_x ∇_{x'}ᵀ K, entry (a, b) = ∂_{x_a} ∂_{x'_b} K
    pub cross_hessian: DMatrix<f64>,
    /// tr[D ∇_{x'} ∇_{x'}ᵀ K]
    pub trace_d_hess_xp: f64,
    /// ∇_x tr[D ∇_{x'} ∇_{x'}ᵀ K]
    pub grad_x_trace_d_hess_xp: DVector<f64>,
}

pub fn kernel_derivatives(
    x: &[f64],
    xp: &[f64],
    d_matrix: &DMatrix<f64>,
    params: &KernelParams,
) -> KernelDerivatives {
    let dim = x.len();
    let l2 = params.lengthscale * params.lengthscale;
    let k = k_eval(x, xp, params);
    let u = DVector::from_iterator(dim, x.iter().zip(xp).map(|(a, b)| (a - b) / l2));
    let du = d_matrix * &u;
    let quad = u.dot(&du) - d_matrix.trace() / l2;
    let cross_hessian = (DMatrix::identity(dim, dim) / l2 - &u * u.transpose()) * k;
    KernelDerivatives {
        k,
        grad_x: &u * (-k),
        grad_xp: &u * k,
        cross_hessian,
        trace_d_hess_xp: k * quad,
        grad_x_trace_d_hess_xp: &u * (-k * quad) + du * (2.0 * k / l2),
    }
}

/// Median pairwise Euclidean distance over at most 1000 evenly strided points.
pub fn median_heuristic(data: &PointSet) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::DegenerateData("need at least two points".into()));
    }
    let stride = data.len().div_ceil(1000);
    let sub = data.stride(stride);
    let n = sub.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(sub.row(i), sub.row(j)).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else if dists[m - 1] > 0.0 {
        // more than half the pairs coincide; fall back to the mean distance
        Ok(dists.iter().sum::<f64>() / m as f64)
    } else {
        Err(Error::DegenerateData("all points are identical".into()))
    }
}
