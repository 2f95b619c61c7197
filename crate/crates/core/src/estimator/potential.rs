//! Potentials ψ, the empirical functional
//! `ε_emp[ψ] = Σ_i [½ ∇ψ·A∇ψ + ℒ*ψ](x_i)` and the Gaussian-bump baseline
//! that minimises it in closed form.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_checked, EstimatorConfig, FittedEstimator, JumpModel};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::points::PointSet;
use crate::singular_quadrature::{mc_jump_nd, JumpKernelTable, JumpRule, McConfig, QuadConfig};

/// A scalar potential with the derivatives the adjoint operator needs.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>>;
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>>;
    /// Bounded potentials have a convergent jump integral.
    fn is_bounded(&self) -> bool;
    /// `∫ [ψ(x + y) - ψ(x)] ν(dy)` at every row of `xs`, for the jump measure
    /// of `config` (stability index and scale).
    fn jump_terms(&self, xs: &PointSet, config: &EstimatorConfig) -> Result<Vec<f64>>;
}

/// `ℒ*ψ(x) = r·∇ψ + ½ tr(D ∇∇ᵀψ) + ∫ [ψ(x+y) - ψ(x)] ν(dy)` is summed with
/// `½ ∇ψ·A∇ψ` over the rows of `data`.
pub fn empirical_functional<P: Potential + ?Sized>(
    psi: &P,
    data: &PointSet,
    config: &EstimatorConfig,
) -> Result<f64> {
    if psi.dim() != data.dim() {
        return Err(Error::domain(
            "data",
            "dimension differs from the potential",
        ));
    }
    config.validate(data.dim())?;
    let jumps = if config.alpha.is_some() {
        if !psi.is_bounded() {
            return Err(Error::domain(
                "psi",
                "the jump integral of an unbounded potential need not converge",
            ));
        }
        psi.jump_terms(data, config)?
    } else {
        vec![0.0; data.len()]
    };
    let rows: Vec<&[f64]> = data.rows().collect();
    let terms: Vec<Result<f64>> = rows
        .par_iter()
        .zip(&jumps)
        .map(|(x, jump)| {
            let g = psi.gradient(x)?;
            let h = psi.hessian(x)?;
            let d = config.d_at(x)?;
            let a = config.a_at(x, &d);
            let r = DVector::from_vec(config.known_drift.eval(x));
            Ok(0.5 * g.dot(&(a * &g)) + r.dot(&g) + 0.5 * (d * h).trace() + jump)
        })
        .collect();
    // summed in data order, independent of the thread count
    terms.into_iter().sum()
}

impl Potential for FittedEstimator {
    fn dim(&self) -> usize {
        FittedEstimator::dim(self)
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.psi_at(x)
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.grad_psi_at(x)
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.hessian_psi_at(x)
    }
    fn is_bounded(&self) -> bool {
        true
    }
    fn jump_terms(&self, xs: &PointSet, config: &EstimatorConfig) -> Result<Vec<f64>> {
        let own = self.config();
        let same_measure = match (own.alpha, config.alpha) {
            (Some(a), Some(b)) => a == b && own.jump_scale == config.jump_scale,
            (None, None) => true,
            _ => false,
        };
        if !same_measure {
            return Err(Error::Unsupported(
                "jump terms of a fitted potential are tabulated for its own jump measure only"
                    .into(),
            ));
        }
        if matches!(self.model.jump, Some(JumpModel::MonteCarlo { .. })) {
            return Err(Error::Unsupported(
                "the jump term of a fitted potential is only available in one dimension".into(),
            ));
        }
        let rows: Vec<&[f64]> = xs.rows().collect();
        rows.par_iter().map(|x| self.jump_psi_at(x)).collect()
    }
}

/// `ψ(x) = Σ_k ω_k exp(-‖x - c_k‖² / 2 width²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpPotential {
    pub centers: PointSet,
    pub width: f64,
    pub weights: Vec<f64>,
}

impl BumpPotential {
    /// Bump values `φ_k(x)` and offsets `x - c_k`.
    fn bumps<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = (f64, Vec<f64>, f64)> + 'a {
        let w2 = self.width * self.width;
        self.centers
            .rows()
            .zip(&self.weights)
            .map(move |(c, &omega)| {
                let diff: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
                let r2: f64 = diff.iter().map(|v| v * v).sum();
                ((-0.5 * r2 / w2).exp(), diff, omega)
            })
    }

    /// `r(x) + A(x) ∇ψ(x)`.
    pub fn drift_at(&self, x: &[f64], config: &EstimatorConfig) -> Result<Vec<f64>> {
        let d = config.d_at(x)?;
        let f = config.a_at(x, &d) * self.gradient(x)?;
        let r = config.known_drift.eval(x);
        Ok(r.iter().zip(f.iter()).map(|(r, f)| r + f).collect())
    }

    fn jump_table(&self, data: &PointSet, alpha: f64) -> Result<JumpKernelTable> {
        let span = joint_span(data, &self.centers);
        let w = self.width;
        let kernel = KernelParams::new(w, 1.0)?;
        let rule = JumpRule::new(alpha, &QuadConfig::for_kernel(w, span))?;
        JumpKernelTable::new(&kernel, &rule, 16.0 * w, span + 60.0 * w)
    }
}

/// `max - min` over the union of two one-dimensional point sets.
fn joint_span(a: &PointSet, b: &PointSet) -> f64 {
    let all = a.as_slice().iter().chain(b.as_slice());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

impl Potential for BumpPotential {
    fn dim(&self) -> usize {
        self.centers.dim()
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.bumps(x).map(|(phi, _, omega)| omega * phi).sum())
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let w2 = self.width * self.width;
        let mut g = DVector::zeros(x.len());
        for (phi, diff, omega) in self.bumps(x) {
            for (ga, da) in g.iter_mut().zip(&diff) {
                *ga -= omega * phi * da / w2;
            }
        }
        Ok(g)
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let w2 = self.width * self.width;
        let dim = x.len();
        let mut h = DMatrix::zeros(dim, dim);
        for (phi, diff, omega) in self.bumps(x) {
            let dv = DVector::from_vec(diff);
            h += (&dv * dv.transpose() / (w2 * w2) - DMatrix::identity(dim, dim) / w2)
                * (omega * phi);
        }
        Ok(h)
    }
    fn is_bounded(&self) -> bool {
        true
    }
    fn jump_terms(&self, xs: &PointSet, config: &EstimatorConfig) -> Result<Vec<f64>> {
        let Some(alpha) = config.alpha else {
            return Ok(vec![0.0; xs.len()]);
        };
        let weight = config.jump_weight();
        if self.dim() == 1 {
            let table = self.jump_table(xs, alpha)?;
            return Ok(xs
                .as_slice()
                .iter()
                .map(|&x| {
                    weight
                        * self
                            .centers
                            .as_slice()
                            .iter()
                            .zip(&self.weights)
                            .map(|(c, omega)| omega * table.value(x - c))
                            .sum::<f64>()
                })
                .collect());
        }
        let w_max = 50.0 * self.width + 50.0 * xs.spread().max(self.centers.spread());
        let mc = McConfig::for_kernel(self.width, w_max, config.mc_samples, config.mc_seed);
        xs.rows()
            .map(|x| {
                let f0 = [self.value(x)?];
                let lap = [self.hessian(x)?.trace()];
                let mut shifted = vec![0.0; x.len()];
                let est = mc_jump_nd(
                    |w, out| {
                        for (s, (a, b)) in shifted.iter_mut().zip(x.iter().zip(w)) {
                            *s = a + b;
                        }
                        out[0] = self.value(&shifted).unwrap_or(f64::NAN);
                    },
                    x.len(),
                    &f0,
                    &lap,
                    &[0.0],
                    alpha,
                    &mc,
                )?;
                Ok(weight * est[0].value)
            })
            .collect()
    }
}

/// Largest number of bumps accepted by [`fit_parametric_bumps`].
pub const MAX_BUMPS: usize = 200;

/// Minimises `ε_emp[ψ_ω] + ½ λ ‖ω‖²` over `ψ_ω = Σ_k ω_k φ_k` with Gaussian
/// bumps `φ_k` of the given width centred at `centers`:
/// `ω = -(M + λI)⁻¹ v`, `M = Σ_i ∇φ(x_i) A(x_i) ∇φ(x_i)ᵀ`, `v_k = Σ_i ℒ*φ_k(x_i)`.
///
/// Uses [`DEFAULT_BUMP_RIDGE`] as the relative ridge; see
/// [`fit_parametric_bumps_with_ridge`].
pub fn fit_parametric_bumps(
    data: &PointSet,
    centers: &PointSet,
    width: f64,
    config: &EstimatorConfig,
) -> Result<BumpPotential> {
    fit_parametric_bumps_with_ridge(data, centers, width, config, DEFAULT_BUMP_RIDGE)
}

/// Relative ridge used by [`fit_parametric_bumps`].
pub const DEFAULT_BUMP_RIDGE: f64 = 3e-2;

/// As [`fit_parametric_bumps`] with `λ = rel · max(tr M / K, n / width²)`.
/// The second term is the largest possible diagonal entry of `M` for
/// unit-height bumps and keeps bumps without data support at ω ≈ 0.
pub fn fit_parametric_bumps_with_ridge(
    data: &PointSet,
    centers: &PointSet,
    width: f64,
    config: &EstimatorConfig,
    rel: f64,
) -> Result<BumpPotential> {
    if !(rel >= 0.0 && rel.is_finite()) {
        return Err(Error::domain(
            "ridge",
            format!("must be non-negative, got {rel}"),
        ));
    }
    let dim = data.dim();
    config.validate(dim)?;
    let k = centers.len();
    if k == 0 || k > MAX_BUMPS {
        return Err(Error::domain(
            "centers",
            format!("need 1 to {MAX_BUMPS} centres, got {k}"),
        ));
    }
    if centers.dim() != dim {
        return Err(Error::domain("centers", "dimension differs from the data"));
    }
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::domain(
            "width",
            format!("must be positive, got {width}"),
        ));
    }
    if data.is_empty() {
        return Err(Error::DegenerateData("no data".into()));
    }
    // unit-weight bumps give each φ_k separately through `jump_terms`
    let mut jumps = vec![vec![0.0; data.len()]; k];
    if config.alpha.is_some() {
        for (kk, c) in centers.rows().enumerate() {
            let single = BumpPotential {
                centers: PointSet::new(dim, c.to_vec())?,
                width,
                weights: vec![1.0],
            };
            jumps[kk] = single.jump_terms(data, config)?;
        }
    }
    let w2 = width * width;
    let mut m = DMatrix::<f64>::zeros(k, k);
    let mut v = DVector::<f64>::zeros(k);
    let mut grads = DMatrix::<f64>::zeros(k, dim);
    for (i, x) in data.rows().enumerate() {
        let d = config.d_at(x)?;
        let a = config.a_at(x, &d);
        let r = config.known_drift.eval(x);
        for (kk, c) in centers.rows().enumerate() {
            let diff = DVector::from_iterator(dim, x.iter().zip(c).map(|(a, b)| a - b));
            let phi = (-0.5 * diff.norm_squared() / w2).exp();
            let grad = &diff * (-phi / w2);
            let hess =
                (&diff * diff.transpose() / (w2 * w2) - DMatrix::identity(dim, dim) / w2) * phi;
            let drift: f64 = r.iter().zip(grad.iter()).map(|(r, g)| r * g).sum();
            v[kk] += drift + 0.5 * (&d * hess).trace() + jumps[kk][i];
            grads.set_row(kk, &grad.transpose());
        }
        m += &grads * a * grads.transpose();
    }
    let ridge = rel * (m.trace() / k as f64).max(data.len() as f64 / w2);
    for kk in 0..k {
        m[(kk, kk)] += ridge;
    }
    let (weights, _, _) = solve_checked(&m, &(-v))?;
    Ok(BumpPotential {
        centers: centers.clone(),
        width,
        weights: weights.as_slice().to_vec(),
    })
}
