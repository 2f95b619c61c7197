//! The kernel drift estimator.
//!
//! With `v_j = A(x_j) ∇ψ(x_j) + r(x_j)` the potential is
//!
//! `ψ(x) = -C Σ_j [∇_{x'}K(x, x_j)·v_j + ½ tr(D(x_j) ∇_{x'}∇_{x'}ᵀK(x, x_j)) + z(x, x_j)]`
//!
//! where `z(x, x_j) = ∫ [K(x, x_j + w) - K(x, x_j)] ν_α(dw)`. Taking the
//! gradient at the data points gives the dense system
//! `(I + C B A) b + C (B r + ∇y + ∇z) = 0` for `b_i = ∇ψ(x_i)`, with
//! `B_ij = ∇_x∇_{x'}ᵀK(x_i, x_j)` and `A` block diagonal.
//!
//! In one dimension the jump terms are read from a [`JumpKernelTable`] built
//! once per fit. In higher dimensions they are Monte Carlo estimates, with
//! seed `mc_seed + j` for data point `j`, so every evaluation point sees the
//! same random numbers.

mod metrics;
mod potential;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{MatrixField, VectorField};
use crate::kernel::{kernel_derivatives, median_heuristic, KernelParams};
use crate::levy_noise::check_alpha;
use crate::linalg::DenseLu;
use crate::points::PointSet;
use crate::singular_quadrature::{z_and_grad_z, JumpKernelTable, JumpRule, McConfig, QuadConfig};

pub use metrics::{relative_entropy_rate, rmse_on_grid};
pub use potential::{
    empirical_functional, fit_parametric_bumps, fit_parametric_bumps_with_ridge, BumpPotential,
    Potential, DEFAULT_BUMP_RIDGE,
};

/// Fewest estimation points accepted after thinning.
pub const MIN_POINTS: usize = 50;
/// Relative residual bound on the solved system.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Largest accepted 1-norm condition estimate of `I + C B A`.
pub const MAX_CONDITION: f64 = 1e12;
const ARTIFACT_FORMAT: &str = "levy-drift-estimator";
const ARTIFACT_VERSION: u32 = 1;

/// The weight matrix `A(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AMode {
    /// `scale · I`.
    Identity { scale: f64 },
    /// `A(x) = D(x)`.
    EqualToD,
}

impl Default for AMode {
    fn default() -> Self {
        AMode::Identity { scale: 1.0 }
    }
}

/// Kernel hyperparameters; a missing lengthscale is set to
/// `median_multiplier` times the median heuristic on the estimation points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelChoice {
    pub lengthscale: Option<f64>,
    pub variance: f64,
    pub median_multiplier: f64,
}

impl Default for KernelChoice {
    fn default() -> Self {
        Self {
            lengthscale: None,
            variance: 1.0,
            median_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Weight of the data term against the kernel penalty.
    #[serde(rename = "C", alias = "c")]
    pub c: f64,
    pub a_mode: AMode,
    /// The known drift part `r`.
    pub known_drift: VectorField,
    pub kernel: KernelChoice,
    /// Jump quadrature; defaults to [`QuadConfig::for_kernel`].
    pub quad: Option<QuadConfig>,
    /// Stability index of the jump noise. `None` switches the jump terms off.
    pub alpha: Option<f64>,
    /// Scale of the stable noise; the jump measure is multiplied by `scale^α`.
    pub jump_scale: f64,
    /// Diffusion matrix `D = σσᵀ`.
    pub diffusion: MatrixField,
    pub max_points: usize,
    /// Monte Carlo samples per jump integral when `d ≥ 2`.
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            a_mode: AMode::default(),
            known_drift: VectorField::Zero,
            kernel: KernelChoice::default(),
            quad: None,
            alpha: None,
            jump_scale: 1.0,
            diffusion: MatrixField::default(),
            max_points: 1500,
            mc_samples: 20_000,
            mc_seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::domain(
                "C",
                format!("must be positive, got {}", self.c),
            ));
        }
        if let AMode::Identity { scale } = self.a_mode {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::domain(
                    "a_mode",
                    format!("scale must be positive, got {scale}"),
                ));
            }
        }
        let m = self.kernel.median_multiplier;
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::domain(
                "median_multiplier",
                format!("must be positive, got {m}"),
            ));
        }
        if let Some(l) = self.kernel.lengthscale {
            KernelParams::new(l, self.kernel.variance)?;
        } else {
            KernelParams::new(1.0, self.kernel.variance)?;
        }
        if let Some(alpha) = self.alpha {
            check_alpha(alpha, false)?;
        }
        if !(self.jump_scale > 0.0 && self.jump_scale.is_finite()) {
            return Err(Error::domain("jump_scale", "must be positive"));
        }
        if let Some(q) = &self.quad {
            q.validate()?;
        }
        self.diffusion.validate(dim, true)?;
        if self.max_points < MIN_POINTS {
            return Err(Error::domain(
                "max_points",
                format!("must be at least {MIN_POINTS}"),
            ));
        }
        if self.alpha.is_some() && dim > 1 && self.mc_samples < 2 {
            return Err(Error::domain("mc_samples", "need at least two samples"));
        }
        Ok(())
    }

    pub(crate) fn jump_weight(&self) -> f64 {
        self.alpha.map_or(0.0, |a| self.jump_scale.powf(a))
    }

    pub(crate) fn a_at(&self, x: &[f64], d: &DMatrix<f64>) -> DMatrix<f64> {
        match self.a_mode {
            AMode::Identity { scale } => DMatrix::identity(x.len(), x.len()) * scale,
            AMode::EqualToD => d.clone(),
        }
    }

    pub(crate) fn d_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.diffusion.eval(x);
        if d.nrows() != x.len() || d.ncols() != x.len() {
            return Err(Error::domain(
                "diffusion",
                format!(
                    "expected a {0}×{0} matrix, got {1}×{2}",
                    x.len(),
                    d.nrows(),
                    d.ncols()
                ),
            ));
        }
        Ok(d)
    }
}

/// Wall-clock budget checked during assembly.
#[derive(Debug, Clone, Copy)]
pub struct Deadline {
    start: Instant,
    limit: Duration,
}

impl Deadline {
    pub fn after(limit: Duration) -> Self {
        Self {
            start: Instant::now(),
            limit,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.start.elapsed() > self.limit {
            Err(Error::Timeout {
                limit_secs: self.limit.as_secs(),
            })
        } else {
            Ok(())
        }
    }
}

fn check(deadline: Option<&Deadline>) -> Result<()> {
    deadline.map_or(Ok(()), Deadline::check)
}

#[derive(Debug, Clone)]
enum JumpModel {
    Table {
        table: Arc<JumpKernelTable>,
        weight: f64,
    },
    MonteCarlo {
        alpha: f64,
        quad: QuadConfig,
        mc: McConfig,
        weight: f64,
    },
}

/// Numbers describing one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub points_used: usize,
    pub stride: usize,
    pub lengthscale: f64,
    /// `‖(I + CBA) b + C rhs‖ / ‖C rhs‖`.
    pub relative_residual: f64,
    pub condition_estimate: f64,
    pub assembly_secs: f64,
    pub solve_secs: f64,
}

/// Everything fixed before the solve: points, fields at the points and the
/// jump model.
#[derive(Debug, Clone)]
struct Model {
    config: EstimatorConfig,
    kernel: KernelParams,
    points: PointSet,
    r_at_points: DVector<f64>,
    a_blocks: Vec<DMatrix<f64>>,
    d_blocks: Vec<DMatrix<f64>>,
    jump: Option<JumpModel>,
}

/// `I + C B A` and `B r + ∇y + ∇z`.
struct System {
    matrix: DMatrix<f64>,
    rhs: DVector<f64>,
}

/// κ and its first four derivatives at `t`, sharing one exponential.
#[inline]
fn se_profile(kernel: &KernelParams, t: f64) -> [f64; 5] {
    let inv_l = 1.0 / kernel.lengthscale;
    let u = t * inv_l;
    let u2 = u * u;
    let e = kernel.variance * (-0.5 * u2).exp();
    let (i2, i3) = (inv_l * inv_l, inv_l * inv_l * inv_l);
    [
        e,
        -u * e * inv_l,
        (u2 - 1.0) * e * i2,
        -(u2 - 3.0) * u * e * i3,
        (u2 * u2 - 6.0 * u2 + 3.0) * e * i2 * i2,
    ]
}

impl Model {
    fn new(points: PointSet, config: &EstimatorConfig) -> Result<Self> {
        let dim = points.dim();
        let lengthscale = match config.kernel.lengthscale {
            Some(l) => l,
            None => config.kernel.median_multiplier * median_heuristic(&points)?,
        };
        let kernel = KernelParams::new(lengthscale, config.kernel.variance)?;
        let quad = config
            .quad
            .unwrap_or_else(|| QuadConfig::for_kernel(lengthscale, points.spread()));
        let mut resolved = config.clone();
        resolved.kernel.lengthscale = Some(lengthscale);
        resolved.quad = Some(quad);

        let mut r_at_points = DVector::zeros(points.len() * dim);
        let mut a_blocks = Vec::with_capacity(points.len());
        let mut d_blocks = Vec::with_capacity(points.len());
        for (j, x) in points.rows().enumerate() {
            resolved
                .known_drift
                .eval_into(x, &mut r_at_points.as_mut_slice()[j * dim..(j + 1) * dim]);
            let d = resolved.d_at(x)?;
            let a = resolved.a_at(x, &d);
            if a.clone().cholesky().is_none() {
                return Err(Error::domain(
                    "a_mode",
                    format!("A(x) is not positive definite at point {j}"),
                ));
            }
            a_blocks.push(a);
            d_blocks.push(d);
        }
        if r_at_points.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("known_drift", "non-finite value at the data"));
        }
        let jump = Self::jump_model(&resolved, &kernel, &quad, &points)?;
        Ok(Self {
            config: resolved,
            kernel,
            points,
            r_at_points,
            a_blocks,
            d_blocks,
            jump,
        })
    }

    fn jump_model(
        config: &EstimatorConfig,
        kernel: &KernelParams,
        quad: &QuadConfig,
        points: &PointSet,
    ) -> Result<Option<JumpModel>> {
        let Some(alpha) = config.alpha else {
            return Ok(None);
        };
        let weight = config.jump_weight();
        let l = kernel.lengthscale;
        if points.dim() == 1 {
            let rule = JumpRule::new(alpha, quad)?;
            let reach = 2.0 * points.spread() + 60.0 * l;
            let table = JumpKernelTable::new(kernel, &rule, 16.0 * l, reach)?;
            Ok(Some(JumpModel::Table {
                table: Arc::new(table),
                weight,
            }))
        } else {
            Ok(Some(JumpModel::MonteCarlo {
                alpha,
                quad: *quad,
                mc: McConfig::for_kernel(l, quad.w_max, config.mc_samples, config.mc_seed),
                weight,
            }))
        }
    }

    fn dim(&self) -> usize {
        self.points.dim()
    }

    fn block(v: &DVector<f64>, j: usize, dim: usize) -> &[f64] {
        &v.as_slice()[j * dim..(j + 1) * dim]
    }

    /// `(z, ∇_x z)` for `x` against data point `j`, already weighted.
    fn jump_pair(&self, x: &[f64], j: usize) -> Result<(f64, Vec<f64>)> {
        match &self.jump {
            None => Ok((0.0, vec![0.0; x.len()])),
            Some(JumpModel::Table { table, weight }) => {
                let delta = x[0] - self.points.row(j)[0];
                Ok((
                    weight * table.value(delta),
                    vec![weight * table.derivative(1, delta)],
                ))
            }
            Some(JumpModel::MonteCarlo {
                alpha,
                quad,
                mc,
                weight,
            }) => {
                let pair = z_and_grad_z(
                    x,
                    self.points.row(j),
                    &self.kernel,
                    *alpha,
                    quad,
                    &mc.with_seed(mc.seed.wrapping_add(j as u64)),
                )?;
                Ok((
                    weight * pair.z,
                    pair.grad_z.iter().map(|g| weight * g).collect(),
                ))
            }
        }
    }

    fn assemble(&self, deadline: Option<&Deadline>) -> Result<System> {
        let dim = self.dim();
        let m = self.points.len();
        let md = m * dim;
        let mut b = DMatrix::<f64>::zeros(md, md);
        let mut gy = vec![0.0; md];
        let mut gz = vec![0.0; md];
        // B is symmetric, so block column j is filled from the pairs (x_j, x_i).
        b.as_mut_slice()
            .par_chunks_mut(dim * md)
            .zip(gy.par_chunks_mut(dim))
            .zip(gz.par_chunks_mut(dim))
            .enumerate()
            .try_for_each(|(j, ((col, gy_j), gz_j))| -> Result<()> {
                if j % 32 == 0 {
                    check(deadline)?;
                }
                if dim == 1 {
                    self.column_1d(j, col, &mut gy_j[0], &mut gz_j[0]);
                    Ok(())
                } else {
                    self.column_nd(j, col, gy_j, gz_j)
                }
            })?;
        check(deadline)?;

        let mut rhs = &b * &self.r_at_points;
        for k in 0..md {
            rhs[k] += gy[k] + gz[k];
        }
        // I + C B A, one block column at a time
        let c = self.config.c;
        for (j, a) in self.a_blocks.iter().enumerate() {
            let mut cols = b.columns_mut(j * dim, dim);
            let scaled = &cols * a * c;
            cols.copy_from(&scaled);
        }
        for k in 0..md {
            b[(k, k)] += 1.0;
        }
        Ok(System { matrix: b, rhs })
    }

    fn column_1d(&self, j: usize, col: &mut [f64], gy: &mut f64, gz: &mut f64) {
        let x = self.points.as_slice();
        let xj = x[j];
        let (mut sy, mut sz) = (0.0, 0.0);
        let table = match &self.jump {
            Some(JumpModel::Table { table, weight }) => Some((table.as_ref(), *weight)),
            _ => None,
        };
        for (i, entry) in col.iter_mut().enumerate() {
            let delta = xj - x[i];
            let p = se_profile(&self.kernel, delta);
            *entry = -p[2];
            sy += 0.5 * self.d_blocks[i][(0, 0)] * p[3];
            if let Some((t, w)) = table {
                sz += w * t.derivative(1, delta);
            }
        }
        *gy = sy;
        *gz = sz;
    }

    fn column_nd(&self, j: usize, col: &mut [f64], gy: &mut [f64], gz: &mut [f64]) -> Result<()> {
        let dim = self.dim();
        let md = self.points.len() * dim;
        let xj = self.points.row(j);
        for (i, xi) in self.points.rows().enumerate() {
            let kd = kernel_derivatives(xj, xi, &self.d_blocks[i], &self.kernel);
            for bcol in 0..dim {
                for a in 0..dim {
                    col[bcol * md + i * dim + a] = kd.cross_hessian[(a, bcol)];
                }
            }
            let (_, grad_z) = self.jump_pair(xj, i)?;
            for a in 0..dim {
                gy[a] += 0.5 * kd.grad_x_trace_d_hess_xp[a];
                gz[a] += grad_z[a];
            }
        }
        Ok(())
    }

    /// `(Σ_j ∇_{x'}K·v_j, ½ Σ_j tr(D_j ∇_{x'}∇_{x'}ᵀK), Σ_j z)` at `x`.
    fn value_terms(&self, x: &[f64], v: &DVector<f64>) -> Result<(f64, f64, f64)> {
        let dim = self.dim();
        let (mut kv, mut y, mut z) = (0.0, 0.0, 0.0);
        if dim == 1 {
            for (j, xj) in self.points.as_slice().iter().enumerate() {
                let delta = x[0] - xj;
                let p = se_profile(&self.kernel, delta);
                kv += -p[1] * v[j];
                y += 0.5 * self.d_blocks[j][(0, 0)] * p[2];
                if let Some(JumpModel::Table { table, weight }) = &self.jump {
                    z += weight * table.value(delta);
                }
            }
        } else {
            for (j, xj) in self.points.rows().enumerate() {
                let kd = kernel_derivatives(x, xj, &self.d_blocks[j], &self.kernel);
                let vj = Self::block(v, j, dim);
                kv += kd.grad_xp.iter().zip(vj).map(|(g, v)| g * v).sum::<f64>();
                y += 0.5 * kd.trace_d_hess_xp;
                z += self.jump_pair(x, j)?.0;
            }
        }
        Ok((kv, y, z))
    }

    /// `Σ_j [∇_x∇_{x'}ᵀK·v_j + ½∇_x tr(D_j ∇_{x'}∇_{x'}ᵀK) + ∇_x z]` at `x`.
    fn gradient_terms(&self, x: &[f64], v: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = self.dim();
        if dim == 1 {
            let mut s = 0.0;
            for (j, xj) in self.points.as_slice().iter().enumerate() {
                let delta = x[0] - xj;
                let p = se_profile(&self.kernel, delta);
                s += -p[2] * v[j] + 0.5 * self.d_blocks[j][(0, 0)] * p[3];
                if let Some(JumpModel::Table { table, weight }) = &self.jump {
                    s += weight * table.derivative(1, delta);
                }
            }
            return Ok(DVector::from_element(1, s));
        }
        let mut s = DVector::zeros(dim);
        for (j, xj) in self.points.rows().enumerate() {
            let kd = kernel_derivatives(x, xj, &self.d_blocks[j], &self.kernel);
            let vj = DVector::from_column_slice(Self::block(v, j, dim));
            s += kd.cross_hessian * vj + kd.grad_x_trace_d_hess_xp * 0.5;
            let (_, gz) = self.jump_pair(x, j)?;
            s += DVector::from_vec(gz);
        }
        Ok(s)
    }

    /// `∂²_x` of the summed terms, one dimension only.
    fn hessian_terms_1d(&self, x: f64, v: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for (j, xj) in self.points.as_slice().iter().enumerate() {
            let delta = x - xj;
            let p = se_profile(&self.kernel, delta);
            s += -p[3] * v[j] + 0.5 * self.d_blocks[j][(0, 0)] * p[4];
            if let Some(JumpModel::Table { table, weight }) = &self.jump {
                s += weight * table.derivative(2, delta);
            }
        }
        s
    }

    /// The jump operator applied to the summed terms, one dimension only.
    fn jump_terms_1d(&self, x: f64, v: &DVector<f64>) -> Result<f64> {
        let Some(JumpModel::Table { table, weight }) = &self.jump else {
            return Ok(0.0);
        };
        let mut s = 0.0;
        for (j, xj) in self.points.as_slice().iter().enumerate() {
            let delta = x - xj;
            s += weight * (-table.derivative(1, delta) * v[j])
                + 0.5 * self.d_blocks[j][(0, 0)] * weight * table.derivative(2, delta)
                + weight * weight * table.second_jump_interp(delta)?;
        }
        Ok(s)
    }

    fn block_apply(&self, blocks: &[DMatrix<f64>], u: &DVector<f64>) -> DVector<f64> {
        let dim = self.dim();
        let mut out = DVector::zeros(u.len());
        for (j, a) in blocks.iter().enumerate() {
            let uj = DVector::from_column_slice(Self::block(u, j, dim));
            out.rows_mut(j * dim, dim).copy_from(&(a * uj));
        }
        out
    }
}

/// Thins `data` by a uniform stride to at most `max_points` rows.
pub fn thin_for_estimation(data: &PointSet, max_points: usize) -> (PointSet, usize) {
    let stride = data.len().div_ceil(max_points.max(1)).max(1);
    (data.stride(stride), stride)
}

/// A solved estimator. Immutable; evaluation methods take `&self`.
#[derive(Debug, Clone)]
pub struct FittedEstimator {
    model: Model,
    b: DVector<f64>,
    rhs: DVector<f64>,
    v: DVector<f64>,
    diagnostics: FitDiagnostics,
}

/// Fits the estimator to `data` (one state per row).
pub fn fit(data: &PointSet, config: &EstimatorConfig) -> Result<FittedEstimator> {
    fit_with_deadline(data, config, None)
}

pub fn fit_with_deadline(
    data: &PointSet,
    config: &EstimatorConfig,
    deadline: Option<&Deadline>,
) -> Result<FittedEstimator> {
    config.validate(data.dim())?;
    let (points, stride) = thin_for_estimation(data, config.max_points);
    if points.len() < MIN_POINTS {
        return Err(Error::DegenerateData(format!(
            "{} estimation points after thinning, need at least {MIN_POINTS}",
            points.len()
        )));
    }
    if points.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("non-finite state in the data".into()));
    }
    let t0 = Instant::now();
    let model = Model::new(points, config)?;
    let system = model.assemble(deadline)?;
    let assembly_secs = t0.elapsed().as_secs_f64();
    debug!(
        "assembled {} points, lengthscale {:.4}, in {assembly_secs:.2} s",
        model.points.len(),
        model.kernel.lengthscale
    );

    let t1 = Instant::now();
    let c = model.config.c;
    let target = -(&system.rhs * c);
    let (b, relative_residual, condition_estimate) = solve_checked(&system.matrix, &target)?;
    let solve_secs = t1.elapsed().as_secs_f64();

    let v = model.block_apply(&model.a_blocks, &b) + &model.r_at_points;
    let diagnostics = FitDiagnostics {
        points_used: model.points.len(),
        stride,
        lengthscale: model.kernel.lengthscale,
        relative_residual,
        condition_estimate,
        assembly_secs,
        solve_secs,
    };
    Ok(FittedEstimator {
        model,
        b,
        rhs: system.rhs,
        v,
        diagnostics,
    })
}

/// Solves `M x = target` by pivoted LU, refusing ill-conditioned systems and
/// applying one step of iterative refinement if the residual is too large.
fn solve_checked(matrix: &DMatrix<f64>, target: &DVector<f64>) -> Result<(DVector<f64>, f64, f64)> {
    let lu = DenseLu::new(matrix.clone())?;
    let cond = lu.condition_estimate();
    if cond.is_nan() || cond > MAX_CONDITION {
        return Err(Error::Conditioning { estimate: cond });
    }
    let scale = target.norm();
    if scale == 0.0 {
        return Ok((DVector::zeros(target.len()), 0.0, cond));
    }
    let mut x = lu.solve(target);
    let mut residual = (matrix * &x - target).norm() / scale;
    if residual > RESIDUAL_TOL {
        let correction = lu.solve(&(target - matrix * &x));
        x += correction;
        residual = (matrix * &x - target).norm() / scale;
    }
    if residual.is_nan() || residual > RESIDUAL_TOL {
        return Err(Error::Conditioning { estimate: cond });
    }
    Ok((x, residual, cond))
}

impl FittedEstimator {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn points(&self) -> &PointSet {
        &self.model.points
    }

    /// `b = (∇ψ(x_1), …, ∇ψ(x_m))`, stacked.
    pub fn gradients_at_points(&self) -> &DVector<f64> {
        &self.b
    }

    /// `B r + ∇y + ∇z`.
    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn r_at_points(&self) -> &DVector<f64> {
        &self.model.r_at_points
    }

    /// The configuration with lengthscale and quadrature filled in.
    pub fn config(&self) -> &EstimatorConfig {
        &self.model.config
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.model.kernel
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::domain(
                "x",
                format!("expected dimension {}, got {}", self.dim(), x.len()),
            ));
        }
        Ok(())
    }

    /// `ψ(x) = -C (k(x)·(A b + r) + y(x) + z(x))`.
    pub fn psi_at(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let (kv, y, z) = self.model.value_terms(x, &self.v)?;
        Ok(-self.model.config.c * (kv + y + z))
    }

    /// ψ in the closed form `C k A (I + CBA)⁻¹ C q - C (k r + y + z)` with
    /// `q = B r + ∇y + ∇z`, re-assembling and re-solving the system.
    pub fn psi_at_resubstituted(&self, xs: &PointSet) -> Result<Vec<f64>> {
        let system = self.model.assemble(None)?;
        let c = self.model.config.c;
        let (u, _, _) = solve_checked(&system.matrix, &(&system.rhs * c))?;
        let au = self.model.block_apply(&self.model.a_blocks, &u);
        xs.rows()
            .map(|x| {
                self.check_dim(x)?;
                let (k_au, _, _) = self.model.value_terms(x, &au)?;
                let (k_r, y, z) = self.model.value_terms(x, &self.model.r_at_points)?;
                Ok(c * k_au - c * (k_r + y + z))
            })
            .collect()
    }

    pub fn grad_psi_at(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(self.model.gradient_terms(x, &self.v)? * (-self.model.config.c))
    }

    /// Hessian of ψ: analytic in one dimension, central differences of the
    /// gradient otherwise.
    pub fn hessian_psi_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let c = self.model.config.c;
        if self.dim() == 1 {
            return Ok(DMatrix::from_element(
                1,
                1,
                -c * self.model.hessian_terms_1d(x[0], &self.v),
            ));
        }
        let dim = self.dim();
        let h = 1e-5 * self.model.kernel.lengthscale;
        let mut hess = DMatrix::zeros(dim, dim);
        let mut xp = x.to_vec();
        for a in 0..dim {
            xp[a] = x[a] + h;
            let gp = self.grad_psi_at(&xp)?;
            xp[a] = x[a] - h;
            let gm = self.grad_psi_at(&xp)?;
            xp[a] = x[a];
            hess.set_column(a, &((gp - gm) / (2.0 * h)));
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }

    /// `∫ [ψ(x + y) - ψ(x)] ν(dy)` for the fitted jump measure (one
    /// dimension), zero without jumps.
    pub fn jump_psi_at(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        match &self.model.jump {
            None => Ok(0.0),
            Some(JumpModel::Table { .. }) => {
                Ok(-self.model.config.c * self.model.jump_terms_1d(x[0], &self.v)?)
            }
            Some(JumpModel::MonteCarlo { .. }) => Err(Error::Unsupported(
                "the jump term of a fitted potential is only available in one dimension".into(),
            )),
        }
    }

    pub fn a_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.model.config.d_at(x)?;
        Ok(self.model.config.a_at(x, &d))
    }

    /// `r(x) + A(x) ∇ψ(x)`.
    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let grad = self.grad_psi_at(x)?;
        let f = self.a_at(x)? * grad;
        let r = self.model.config.known_drift.eval(x);
        Ok(r.iter().zip(f.iter()).map(|(r, f)| r + f).collect())
    }

    /// Drift at every row of `xs`, evaluated in parallel.
    pub fn drift_on(&self, xs: &PointSet) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f64]> = xs.rows().collect();
        rows.par_iter().map(|x| self.drift_at(x)).collect()
    }

    /// `‖(I + CBA) b + C q‖ / ‖C q‖` with the system re-assembled from scratch.
    pub fn system_residual(&self) -> Result<f64> {
        let system = self.model.assemble(None)?;
        let cq = &system.rhs * self.model.config.c;
        let scale = cq.norm();
        let r = (&system.matrix * &self.b + &cq).norm();
        Ok(if scale == 0.0 { r } else { r / scale })
    }

    pub fn to_json(&self) -> Result<String> {
        let artifact = ArtifactRef {
            format: ARTIFACT_FORMAT,
            version: ARTIFACT_VERSION,
            config: &self.model.config,
            points: &self.model.points,
            b: self.b.as_slice(),
            rhs: self.rhs.as_slice(),
            r_at_points: self.model.r_at_points.as_slice(),
            diagnostics: &self.diagnostics,
        };
        Ok(serde_json::to_string_pretty(&artifact)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Artifact = serde_json::from_str(text)?;
        if a.format != ARTIFACT_FORMAT || a.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "unsupported estimator artifact {} v{}",
                a.format, a.version
            )));
        }
        let dim = a.points.dim();
        let md = a.points.len() * dim;
        if a.b.len() != md || a.rhs.len() != md || a.r_at_points.len() != md {
            return Err(Error::Config(
                "artifact vectors do not match the points".into(),
            ));
        }
        let model = Model::new(a.points, &a.config)?;
        let b = DVector::from_vec(a.b);
        let r_at_points = DVector::from_vec(a.r_at_points);
        let v = model.block_apply(&model.a_blocks, &b) + &r_at_points;
        Ok(Self {
            model: Model {
                r_at_points,
                ..model
            },
            b,
            rhs: DVector::from_vec(a.rhs),
            v,
            diagnostics: a.diagnostics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize)]
struct ArtifactRef<'a> {
    format: &'a str,
    version: u32,
    config: &'a EstimatorConfig,
    points: &'a PointSet,
    b: &'a [f64],
    rhs: &'a [f64],
    r_at_points: &'a [f64],
    diagnostics: &'a FitDiagnostics,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Artifact {
    format: String,
    version: u32,
    config: EstimatorConfig,
    points: PointSet,
    b: Vec<f64>,
    rhs: Vec<f64>,
    r_at_points: Vec<f64>,
    diagnostics: FitDiagnostics,
}

/// Outcome of a held-out hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best_c: f64,
    /// `None` when the lengthscale came from the median heuristic.
    pub best_lengthscale: Option<f64>,
    /// `(C, lengthscale, held-out ε_emp per point)`, the score `None` where
    /// the fit failed.
    pub scores: Vec<(f64, Option<f64>, Option<f64>)>,
}

/// The default search grid `10^{-2}, …, 10^{2}`.
pub const C_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];

/// Fraction of the data used for fitting during selection; the rest, taken
/// from the end of the series, is held out.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Chooses C by fitting on the first 80% of `data` and minimising the
/// empirical functional per point on the remaining 20%.
pub fn select_c(
    data: &PointSet,
    config: &EstimatorConfig,
    grid: &[f64],
    deadline: Option<&Deadline>,
) -> Result<Selection> {
    select_hyperparameters(data, config, grid, &[config.kernel.lengthscale], deadline)
}

/// Joint held-out search over C and the kernel lengthscale (`None` entries
/// use the median heuristic of the training part). Ties keep the earlier
/// grid entry.
pub fn select_hyperparameters(
    data: &PointSet,
    config: &EstimatorConfig,
    c_grid: &[f64],
    lengthscale_grid: &[Option<f64>],
    deadline: Option<&Deadline>,
) -> Result<Selection> {
    if c_grid.is_empty() || lengthscale_grid.is_empty() {
        return Err(Error::domain("grid", "empty search grid"));
    }
    let split = (data.len() as f64 * TRAIN_FRACTION) as usize;
    let train = data.slice(0, split);
    let (held, _) = thin_for_estimation(&data.slice(split, data.len()), config.max_points);
    if held.is_empty() {
        return Err(Error::DegenerateData("nothing left to hold out".into()));
    }
    let mut scores = Vec::with_capacity(c_grid.len() * lengthscale_grid.len());
    let mut best: Option<(f64, Option<f64>, f64)> = None;
    let mut last_err = None;
    for &lengthscale in lengthscale_grid {
        for &c in c_grid {
            let mut cfg = EstimatorConfig {
                c,
                ..config.clone()
            };
            cfg.kernel.lengthscale = lengthscale;
            let score = fit_with_deadline(&train, &cfg, deadline).and_then(|fit| {
                empirical_functional(&fit, &held, fit.config()).map(|e| e / held.len() as f64)
            });
            match score {
                Ok(s) if s.is_finite() => {
                    if best.is_none_or(|(_, _, b)| s < b) {
                        best = Some((c, lengthscale, s));
                    }
                    scores.push((c, lengthscale, Some(s)));
                }
                Ok(_) => scores.push((c, lengthscale, None)),
                Err(e @ Error::Timeout { .. }) => return Err(e),
                Err(e) => {
                    debug!("C = {c:e}, lengthscale {lengthscale:?} failed: {e}");
                    scores.push((c, lengthscale, None));
                    last_err = Some(e);
                }
            }
        }
    }
    match best {
        Some((best_c, best_lengthscale, _)) => Ok(Selection {
            best_c,
            best_lengthscale,
            scores,
        }),
        None => Err(last_err.unwrap_or_else(|| Error::DegenerateData("no finite score".into()))),
    }
}

#[cfg(test)]
mod tests;
