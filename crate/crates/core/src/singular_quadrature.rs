//! Jump integrals `∫_{ℝ^d∖{0}} [f(w) - f(0)] ν_α(dw)` for bounded, twice
//! differentiable `f`.
//!
//! In one dimension the integral is symmetrised,
//! `c ∫_0^∞ [f(w) + f(-w) - 2f(0)] w^{-1-α} dw`, which removes the odd part
//! exactly. The remaining integrand is `O(w^{1-α})` at the origin:
//!
//! * `(0, w_min)` is replaced by its second-order Taylor value
//!   `f''(0) w_min^{2-α} / (2-α)`;
//! * `[w_min, w_max]` uses composite Gauss–Legendre on log-spaced panels;
//! * beyond `w_max` the constant part `-2(f(0) - f_∞)` is integrated in closed
//!   form and the decaying remainder is bounded through
//!   [`JumpSection::tail_bound`]. If that bound exceeds `1e-8 · |result|`,
//!   `w_max` is doubled, at most eight times.
//!
//! [`mc_jump_oracle`] is an independent importance-sampling estimate of the
//! same quantity and also serves as the production path for `d ≥ 2`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_derivatives, KernelParams};
use crate::levy_noise::{c_alpha, check_alpha, unit_sphere_area};

const TAIL_REL_TOL: f64 = 1e-8;
const MAX_TAIL_DOUBLINGS: usize = 8;
/// `exp(-t²/2)` underflows to exactly zero beyond this many lengthscales.
const GAUSSIAN_UNDERFLOW: f64 = 38.7;

/// Integration domain and resolution of the deterministic rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    pub w_min: f64,
    pub w_max: f64,
    pub panels_per_decade: usize,
    pub nodes_per_panel: usize,
    /// Upper limit on panel width for `w < fine_reach`, so that features of
    /// width ~ℓ away from the origin are resolved.
    #[serde(default)]
    pub fine_width: Option<f64>,
    #[serde(default)]
    pub fine_reach: f64,
}

impl QuadConfig {
    pub const DEFAULT_PANELS_PER_DECADE: usize = 8;
    pub const DEFAULT_NODES_PER_PANEL: usize = 16;

    /// `w_min = 1e-4 ℓ`, `w_max = 50 ℓ + 50 · spread`, panels at most `2ℓ`
    /// wide out to `spread + 40ℓ`.
    pub fn for_kernel(lengthscale: f64, spread: f64) -> Self {
        Self {
            w_min: 1e-4 * lengthscale,
            w_max: 50.0 * lengthscale + 50.0 * spread,
            panels_per_decade: Self::DEFAULT_PANELS_PER_DECADE,
            nodes_per_panel: Self::DEFAULT_NODES_PER_PANEL,
            fine_width: Some(2.0 * lengthscale),
            fine_reach: spread + 40.0 * lengthscale,
        }
    }

    /// Twice the panels per decade and twice the nodes per panel.
    pub fn refined(&self) -> Self {
        Self {
            panels_per_decade: 2 * self.panels_per_decade,
            nodes_per_panel: 2 * self.nodes_per_panel,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_min > 0.0 && self.w_min < self.w_max && self.w_max.is_finite()) {
            return Err(Error::domain(
                "quad",
                format!(
                    "need 0 < w_min < w_max, got {} and {}",
                    self.w_min, self.w_max
                ),
            ));
        }
        if matches!(self.fine_width, Some(w) if w.is_nan() || w <= 0.0) {
            return Err(Error::domain("quad", "fine_width must be positive"));
        }
        if self.panels_per_decade < 4 || self.nodes_per_panel < 4 {
            return Err(Error::domain(
                "quad",
                "panels_per_decade and nodes_per_panel must be >= 4",
            ));
        }
        Ok(())
    }
}

/// A one-dimensional integrand for the jump operator, re-centred so that
/// the integral is `∫ [f(w) - f(0)] ν_α(dw)`.
pub trait JumpSection {
    fn value(&self, w: f64) -> f64;

    /// `f''(0)`.
    fn curvature_at_origin(&self) -> f64;

    /// `lim_{|w|→∞} f(w)`.
    fn far_field(&self) -> f64 {
        0.0
    }

    /// An upper bound on `|f(w) - far_field|` over `|w| ≥ radius`.
    fn tail_bound(&self, radius: f64) -> f64;

    /// `f''''(0)`, if available; adds the next Taylor term on `(0, w_min)`.
    fn fourth_derivative_at_origin(&self) -> Option<f64> {
        None
    }

    /// Radius beyond which `f(±w)` equals `far_field` exactly in floating
    /// point, if known. Panels past it are integrated in closed form.
    fn exact_beyond(&self) -> Option<f64> {
        None
    }
}

/// A closure with user-supplied curvature, far field and tail bound.
pub struct FnSection<F, B> {
    pub f: F,
    pub curvature: f64,
    pub far_field: f64,
    pub tail: B,
}

impl<F: Fn(f64) -> f64> FnSection<F, fn(f64) -> f64> {
    /// A section with zero far field whose tail is bounded by `sup |f|`.
    pub fn bounded(f: F, curvature: f64, sup: f64) -> FnSection<F, impl Fn(f64) -> f64> {
        FnSection {
            f,
            curvature,
            far_field: 0.0,
            tail: move |_| sup,
        }
    }
}

impl<F: Fn(f64) -> f64, B: Fn(f64) -> f64> JumpSection for FnSection<F, B> {
    fn value(&self, w: f64) -> f64 {
        (self.f)(w)
    }
    fn curvature_at_origin(&self) -> f64 {
        self.curvature
    }
    fn far_field(&self) -> f64 {
        self.far_field
    }
    fn tail_bound(&self, radius: f64) -> f64 {
        (self.tail)(radius)
    }
}

/// `w ↦ κ^{(order)}(offset - w)` for the squared-exponential profile κ.
///
/// With `offset = x - x'`, order 0 is `w ↦ K(x, x' + w)` and order 1 is
/// `w ↦ ∂_x K(x, x' + w)`.
#[derive(Debug, Clone, Copy)]
pub struct SeSection {
    pub kernel: KernelParams,
    pub offset: f64,
    pub order: usize,
}

impl JumpSection for SeSection {
    fn value(&self, w: f64) -> f64 {
        self.kernel.profile_derivative(self.order, self.offset - w)
    }
    fn curvature_at_origin(&self) -> f64 {
        self.kernel.profile_derivative(self.order + 2, self.offset)
    }
    fn tail_bound(&self, radius: f64) -> f64 {
        se_tail_bound(&self.kernel, self.order, radius - self.offset.abs())
    }
    fn exact_beyond(&self) -> Option<f64> {
        Some(self.offset.abs() + GAUSSIAN_UNDERFLOW * self.kernel.lengthscale)
    }
}

/// Bound on `|κ^{(p)}(t)|` over `|t| ≥ gap`, from Cramér's inequality
/// `|He_p(u)| e^{-u²/4} ≤ 1.0865 √(p!)`.
fn se_tail_bound(kernel: &KernelParams, order: usize, gap: f64) -> f64 {
    let l = kernel.lengthscale;
    if gap > GAUSSIAN_UNDERFLOW * l {
        return 0.0;
    }
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    let envelope = if gap > 0.0 {
        (-(gap * gap) / (4.0 * l * l)).exp()
    } else {
        1.0
    };
    kernel.variance * 1.086_435 * fact.sqrt() / l.powi(order as i32) * envelope
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Precomputed nodes of the deterministic rule for one `(α, QuadConfig)`.
#[derive(Debug, Clone)]
pub struct JumpRule {
    alpha: f64,
    c: f64,
    cfg: QuadConfig,
    nodes: Vec<f64>,
    /// Gauss–Legendre weight times `w^{-1-α}`.
    weights: Vec<f64>,
    panel_lo: Vec<f64>,
    panel_start: Vec<usize>,
    /// `Σ weights[panel_start[p]..]`
    suffix_weight: Vec<f64>,
    inner_coef: f64,
    quartic_coef: f64,
    tail_coef: f64,
}

impl JumpRule {
    pub fn new(alpha: f64, cfg: &QuadConfig) -> Result<Self> {
        check_alpha(alpha, false)?;
        cfg.validate()?;
        let c = c_alpha(1, alpha)?;
        let (gl_x, gl_w) = gauss_legendre(cfg.nodes_per_panel);
        let ratio = 10f64.powf(1.0 / cfg.panels_per_decade as f64);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut panel_lo = Vec::new();
        let mut panel_start = Vec::new();
        let mut a = cfg.w_min;
        while a < cfg.w_max {
            let mut b = a * ratio;
            if let Some(width) = cfg.fine_width {
                if a < cfg.fine_reach {
                    b = b.min(a + width);
                }
            }
            // avoid a sliver panel at the end
            if b * ratio.sqrt() >= cfg.w_max {
                b = cfg.w_max;
            }
            panel_lo.push(a);
            panel_start.push(nodes.len());
            let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
            for (x, w) in gl_x.iter().zip(&gl_w) {
                let node = mid + half * x;
                nodes.push(node);
                weights.push(w * half * node.powf(-1.0 - alpha));
            }
            a = b;
        }
        let n_panels = panel_lo.len();
        let mut suffix_weight = vec![0.0; n_panels];
        let mut acc = 0.0;
        for p in (0..n_panels).rev() {
            let end = panel_start.get(p + 1).copied().unwrap_or(nodes.len());
            acc += weights[panel_start[p]..end].iter().sum::<f64>();
            suffix_weight[p] = acc;
        }
        Ok(Self {
            alpha,
            c,
            cfg: *cfg,
            nodes,
            weights,
            panel_lo,
            panel_start,
            suffix_weight,
            inner_coef: cfg.w_min.powf(2.0 - alpha) / (2.0 - alpha),
            quartic_coef: cfg.w_min.powf(4.0 - alpha) / (12.0 * (4.0 - alpha)),
            tail_coef: cfg.w_max.powf(-alpha) / alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn config(&self) -> &QuadConfig {
        &self.cfg
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// One pass of the rule: the integral and its tail error bound.
    fn integrate_once<S: JumpSection + ?Sized>(&self, section: &S) -> (f64, f64) {
        let f0 = section.value(0.0);
        let far = section.far_field();
        let cut = section.exact_beyond().unwrap_or(f64::INFINITY);
        let mut sum = 0.0;
        for (p, &lo) in self.panel_lo.iter().enumerate() {
            if lo >= cut {
                sum += 2.0 * (far - f0) * self.suffix_weight[p];
                break;
            }
            let end = self
                .panel_start
                .get(p + 1)
                .copied()
                .unwrap_or(self.nodes.len());
            for k in self.panel_start[p]..end {
                let w = self.nodes[k];
                sum += self.weights[k] * (section.value(w) + section.value(-w) - 2.0 * f0);
            }
        }
        let quartic = section.fourth_derivative_at_origin().unwrap_or(0.0) * self.quartic_coef;
        let value = self.c
            * (section.curvature_at_origin() * self.inner_coef
                + quartic
                + sum
                + 2.0 * (far - f0) * self.tail_coef);
        let tail_err = 2.0 * self.c * section.tail_bound(self.cfg.w_max) * self.tail_coef;
        (value, tail_err)
    }

    /// The jump integral of `section`, doubling `w_max` until the tail bound
    /// is below `1e-8 · |result|`.
    pub fn integrate<S: JumpSection + ?Sized>(&self, section: &S) -> Result<f64> {
        self.integrate_with_scale(section, 0.0)
    }

    /// As [`integrate`](Self::integrate), with the tail tolerance taken
    /// relative to `max(|result|, scale)`.
    pub fn integrate_with_scale<S: JumpSection + ?Sized>(
        &self,
        section: &S,
        scale: f64,
    ) -> Result<f64> {
        let tail_ok = |value: f64, err: f64| tail_ok(value.abs().max(scale), err);
        let (value, err) = self.integrate_once(section);
        if tail_ok(value, err) {
            return Ok(value);
        }
        let mut cfg = self.cfg;
        for _ in 0..MAX_TAIL_DOUBLINGS {
            cfg.w_max *= 2.0;
            let rule = JumpRule::new(self.alpha, &cfg)?;
            let (value, err) = rule.integrate_once(section);
            if tail_ok(value, err) {
                return Ok(value);
            }
        }
        Err(Error::Convergence(format!(
            "tail bound still above {TAIL_REL_TOL:e} relative after {MAX_TAIL_DOUBLINGS} doublings of w_max (reached {:.3e})",
            cfg.w_max
        )))
    }

    /// Jump integrals of the squared-exponential sections
    /// `w ↦ κ^{(p)}(offset - w)` for `p = lo_order, …, lo_order + out.len() - 1`,
    /// sharing one exponential per node and side.
    pub fn se_sections(
        &self,
        kernel: &KernelParams,
        offset: f64,
        lo_order: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let n = out.len();
        debug_assert!(n <= 4);
        let l = kernel.lengthscale;
        let inv_l = 1.0 / l;
        let s2 = kernel.variance;
        let cut = offset.abs() + GAUSSIAN_UNDERFLOW * l;
        let hi_order = lo_order + n - 1;
        let mut f0 = [0.0; 4];
        for (k, v) in f0.iter_mut().take(n).enumerate() {
            *v = kernel.profile_derivative(lo_order + k, offset);
        }
        // Values of κ^{(p)}(t) for p = lo..=hi from e = s² exp(-u²/2), u = t/ℓ.
        let orders = |t: f64, acc: &mut [f64; 4]| {
            let u = t * inv_l;
            let e = s2 * (-0.5 * u * u).exp();
            if e == 0.0 {
                return;
            }
            let (mut prev, mut cur) = (1.0, u);
            let mut scale = 1.0;
            for p in 0..=hi_order {
                let he = match p {
                    0 => 1.0,
                    1 => u,
                    _ => {
                        let next = u * cur - (p - 1) as f64 * prev;
                        prev = cur;
                        cur = next;
                        cur
                    }
                };
                if p >= lo_order {
                    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                    acc[p - lo_order] += sign * he * scale * e;
                }
                scale *= inv_l;
            }
        };
        let mut sums = [0.0; 4];
        for (p, &lo) in self.panel_lo.iter().enumerate() {
            if lo >= cut {
                for k in 0..n {
                    sums[k] -= 2.0 * f0[k] * self.suffix_weight[p];
                }
                break;
            }
            let end = self
                .panel_start
                .get(p + 1)
                .copied()
                .unwrap_or(self.nodes.len());
            for idx in self.panel_start[p]..end {
                let w = self.nodes[idx];
                let mut vals = [0.0; 4];
                orders(offset - w, &mut vals);
                orders(offset + w, &mut vals);
                let wt = self.weights[idx];
                for k in 0..n {
                    sums[k] += wt * (vals[k] - 2.0 * f0[k]);
                }
            }
        }
        for k in 0..n {
            let order = lo_order + k;
            let curvature = kernel.profile_derivative(order + 2, offset);
            let value =
                self.c * (curvature * self.inner_coef + sums[k] - 2.0 * f0[k] * self.tail_coef);
            let err = 2.0
                * self.c
                * se_tail_bound(kernel, order, self.cfg.w_max - offset.abs())
                * self.tail_coef;
            out[k] = if tail_ok(value, err) {
                value
            } else {
                self.integrate(&SeSection {
                    kernel: *kernel,
                    offset,
                    order,
                })?
            };
        }
        Ok(())
    }
}

fn tail_ok(value: f64, err: f64) -> bool {
    err == 0.0 || err <= TAIL_REL_TOL * value.abs()
}

/// Deterministic jump integral of a one-dimensional section.
pub fn jump_integral_1d<S: JumpSection + ?Sized>(
    section: &S,
    alpha: f64,
    cfg: &QuadConfig,
) -> Result<f64> {
    JumpRule::new(alpha, cfg)?.integrate(section)
}

/// `z(x, x_j)` and `∇_x z(x, x_j)` for one data point `x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPair {
    pub z: f64,
    pub grad_z: Vec<f64>,
}

/// `z(x, x_j) = ∫ [K(x, x_j + w) - K(x, x_j)] ν_α(dw)` and its x-gradient.
///
/// One-dimensional inputs use the deterministic rule; `d ≥ 2` routes to the
/// Monte Carlo estimator with the seed from `mc`.
pub fn z_and_grad_z(
    x: &[f64],
    xj: &[f64],
    kernel: &KernelParams,
    alpha: f64,
    cfg: &QuadConfig,
    mc: &McConfig,
) -> Result<JumpPair> {
    if x.len() == 1 {
        let rule = JumpRule::new(alpha, cfg)?;
        let mut out = [0.0; 2];
        rule.se_sections(kernel, x[0] - xj[0], 0, &mut out)?;
        Ok(JumpPair {
            z: out[0],
            grad_z: vec![out[1]],
        })
    } else {
        mc_z_and_grad_z(x, xj, kernel, alpha, mc)
    }
}

/// Monte Carlo settings: sampling shell `[w_min, w_max]`, sample count and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub w_min: f64,
    pub w_max: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl McConfig {
    /// Shell `[0.02 ℓ, w_max]`; the inner radius trades Taylor bias
    /// (`O(w_min^{4-α})`) against sampling variance.
    pub fn for_kernel(lengthscale: f64, w_max: f64, n_samples: usize, seed: u64) -> Self {
        Self {
            w_min: 0.02 * lengthscale,
            w_max,
            n_samples,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Importance-sampling estimate of `∫_{ℝ^d∖{0}} [f(w) - f(0)] ν_α(dw)` for a
/// vector-valued `f`.
///
/// Radii are drawn from the normalised restriction of `ν_α` to the shell
/// `w_min ≤ ‖w‖ ≤ w_max`, directions uniformly, and each draw is paired with
/// its antipode. The ball inside `w_min` gets the Taylor value
/// `c S_{d-1} Δf(0) w_min^{2-α} / (2d(2-α))` and the far field outside `w_max`
/// its closed-form constant part.
#[allow(clippy::too_many_arguments)]
pub fn mc_jump_nd(
    mut f: impl FnMut(&[f64], &mut [f64]),
    dim: usize,
    value_at_origin: &[f64],
    laplacian_at_origin: &[f64],
    far_field: &[f64],
    alpha: f64,
    cfg: &McConfig,
) -> Result<Vec<McEstimate>> {
    check_alpha(alpha, false)?;
    if !(cfg.w_min > 0.0 && cfg.w_min < cfg.w_max) || cfg.n_samples < 2 {
        return Err(Error::domain(
            "mc",
            "need 0 < w_min < w_max and at least two samples",
        ));
    }
    let outputs = value_at_origin.len();
    let c = c_alpha(dim, alpha)?;
    let area = unit_sphere_area(dim);
    let lo = cfg.w_min.powf(-alpha);
    let hi = cfg.w_max.powf(-alpha);
    let mass = c * area * (lo - hi) / alpha;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = vec![0.0; dim];
    let mut neg = vec![0.0; dim];
    let mut fp = vec![0.0; outputs];
    let mut fm = vec![0.0; outputs];
    let mut sum = vec![0.0; outputs];
    let mut sum_sq = vec![0.0; outputs];
    for _ in 0..cfg.n_samples {
        let u: f64 = rng.random();
        let r = (lo - u * (lo - hi)).powf(-1.0 / alpha);
        if dim == 1 {
            w[0] = r;
        } else {
            for v in w.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.iter_mut().for_each(|v| *v *= r / norm);
        }
        for (n, v) in neg.iter_mut().zip(&w) {
            *n = -v;
        }
        f(&w, &mut fp);
        f(&neg, &mut fm);
        for k in 0..outputs {
            let h = 0.5 * (fp[k] + fm[k]) - value_at_origin[k];
            sum[k] += h;
            sum_sq[k] += h * h;
        }
    }
    let n = cfg.n_samples as f64;
    let inner = c * area * cfg.w_min.powf(2.0 - alpha) / (2.0 * dim as f64 * (2.0 - alpha));
    let outer = c * area * hi / alpha;
    Ok((0..outputs)
        .map(|k| {
            let mean = sum[k] / n;
            let var = (sum_sq[k] / n - mean * mean).max(0.0) * n / (n - 1.0);
            McEstimate {
                value: mass * mean
                    + laplacian_at_origin[k] * inner
                    + (far_field[k] - value_at_origin[k]) * outer,
                std_error: mass * (var / n).sqrt(),
            }
        })
        .collect())
}

/// Monte Carlo estimate of the one-dimensional jump integral; used to
/// validate [`jump_integral_1d`].
pub fn mc_jump_oracle<S: JumpSection + ?Sized>(
    section: &S,
    alpha: f64,
    cfg: &McConfig,
) -> Result<McEstimate> {
    let f0 = [section.value(0.0)];
    let lap = [section.curvature_at_origin()];
    let far = [section.far_field()];
    let est = mc_jump_nd(
        |w, out| out[0] = section.value(w[0]),
        1,
        &f0,
        &lap,
        &far,
        alpha,
        cfg,
    )?;
    Ok(est[0])
}

fn mc_z_and_grad_z(
    x: &[f64],
    xj: &[f64],
    kernel: &KernelParams,
    alpha: f64,
    mc: &McConfig,
) -> Result<JumpPair> {
    let dim = x.len();
    let identity = nalgebra::DMatrix::identity(dim, dim);
    let at = kernel_derivatives(x, xj, &identity, kernel);
    let mut f0 = vec![at.k];
    f0.extend(at.grad_x.iter());
    let mut lap = vec![at.trace_d_hess_xp];
    lap.extend(at.grad_x_trace_d_hess_xp.iter());
    let far = vec![0.0; dim + 1];
    let l2 = kernel.lengthscale * kernel.lengthscale;
    let mut shifted = vec![0.0; dim];
    let est = mc_jump_nd(
        |w, out| {
            let mut r2 = 0.0;
            for a in 0..dim {
                shifted[a] = x[a] - xj[a] - w[a];
                r2 += shifted[a] * shifted[a];
            }
            let k = kernel.variance * (-r2 / (2.0 * l2)).exp();
            out[0] = k;
            for a in 0..dim {
                out[a + 1] = -k * shifted[a] / l2;
            }
        },
        dim,
        &f0,
        &lap,
        &far,
        alpha,
        mc,
    )?;
    Ok(JumpPair {
        z: est[0].value,
        grad_z: est[1..].iter().map(|e| e.value).collect(),
    })
}

/// Sample points `0 = t_0 < t_1 < …`: uniform up to a dense reach, then
/// geometric.
#[derive(Debug, Clone)]
struct TableGrid {
    points: Vec<f64>,
    step: f64,
    uniform_len: usize,
}

impl TableGrid {
    fn new(step: f64, dense_reach: f64, reach: f64) -> Self {
        let uniform_len = (dense_reach / step).ceil() as usize + 1;
        let mut points: Vec<f64> = (0..uniform_len).map(|i| i as f64 * step).collect();
        let mut t = points[uniform_len - 1];
        while t < reach {
            t *= 1.02;
            points.push(t);
        }
        Self {
            points,
            step,
            uniform_len,
        }
    }

    fn reach(&self) -> f64 {
        *self.points.last().unwrap()
    }

    fn locate(&self, t: f64) -> usize {
        let i = (t / self.step) as usize;
        if i + 1 < self.uniform_len {
            return i;
        }
        let idx = self.points.partition_point(|&g| g <= t);
        idx.saturating_sub(1).min(self.points.len() - 2)
    }
}

/// Cubic Hermite interpolant of an even or odd profile, continued past the
/// grid by `|δ|^{-decay}`.
#[derive(Debug, Clone)]
struct Profile {
    values: Vec<f64>,
    slopes: Vec<f64>,
    odd: bool,
    decay: f64,
    suffix_max: Vec<f64>,
}

impl Profile {
    fn new(values: Vec<f64>, slopes: Vec<f64>, odd: bool, decay: f64) -> Self {
        let mut suffix_max = vec![0.0; values.len()];
        let mut m: f64 = 0.0;
        for i in (0..values.len()).rev() {
            m = m.max(values[i].abs());
            suffix_max[i] = m;
        }
        Self {
            values,
            slopes,
            odd,
            decay,
            suffix_max,
        }
    }

    fn eval(&self, grid: &TableGrid, delta: f64) -> f64 {
        let t = delta.abs();
        let sign = if self.odd && delta < 0.0 { -1.0 } else { 1.0 };
        let reach = grid.reach();
        if t >= reach {
            return sign * self.values.last().unwrap() * (reach / t).powf(self.decay);
        }
        let i = grid.locate(t);
        let (a, b) = (grid.points[i], grid.points[i + 1]);
        let h = b - a;
        let s = (t - a) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        sign * (h00 * self.values[i]
            + h10 * h * self.slopes[i]
            + h01 * self.values[i + 1]
            + h11 * h * self.slopes[i + 1])
    }

    /// `sup |profile|` over `|δ| ≥ t`.
    fn sup_beyond(&self, grid: &TableGrid, t: f64) -> f64 {
        if t <= 0.0 {
            return self.suffix_max[0];
        }
        let reach = grid.reach();
        if t >= reach {
            return self.values.last().unwrap().abs() * (reach / t).powf(self.decay);
        }
        self.suffix_max[grid.locate(t)]
    }
}

/// `w ↦ Z^{(order)}(δ - w)` read from the table, with exact Taylor data at
/// the origin.
struct TableSection<'a> {
    table: &'a JumpKernelTable,
    order: usize,
    delta: f64,
    curvature: f64,
    fourth: f64,
}

impl JumpSection for TableSection<'_> {
    fn value(&self, w: f64) -> f64 {
        self.table.profiles[self.order].eval(&self.table.grid, self.delta - w)
    }
    fn curvature_at_origin(&self) -> f64 {
        self.curvature
    }
    fn fourth_derivative_at_origin(&self) -> Option<f64> {
        Some(self.fourth)
    }
    fn tail_bound(&self, radius: f64) -> f64 {
        self.table.profiles[self.order].sup_beyond(&self.table.grid, radius - self.delta.abs())
    }
}

/// Tabulated jump integrals of the squared-exponential profile κ:
/// `Z(δ) = ∫ [κ(δ - w) - κ(δ)] ν_α(dw)` with its first two derivatives, and
/// the second jump integral `J[Z](δ)`.
///
/// Spacing is `ℓ/64` up to `dense_reach`, then geometric with ratio 1.02 up to
/// `reach`; beyond it `Z^{(p)}` is continued by its `|δ|^{-1-α-p}` decay.
/// Interpolation error is of order `1e-9` relative to `max |Z^{(p)}|`.
#[derive(Debug)]
pub struct JumpKernelTable {
    kernel: KernelParams,
    rule: JumpRule,
    grid: TableGrid,
    /// Z, Z' and Z''.
    profiles: [Profile; 3],
    /// Inner cutoff of a few grid steps, so that interpolation error is not
    /// amplified by the singular weight.
    coarse_rule: JumpRule,
    /// Peak magnitude of `J[Z^{(p)}]`, the tolerance floor for its tail.
    profile_scale: [f64; 2],
    second: OnceLock<std::result::Result<Profile, String>>,
}

impl JumpKernelTable {
    pub fn new(
        kernel: &KernelParams,
        rule: &JumpRule,
        dense_reach: f64,
        reach: f64,
    ) -> Result<Self> {
        let l = kernel.lengthscale;
        let alpha = rule.alpha();
        let grid = TableGrid::new(l / 64.0, dense_reach, reach);
        let t = grid.reach();
        // the table reaches past the caller's fine region
        let build_rule = JumpRule::new(
            alpha,
            &QuadConfig {
                fine_width: Some(2.0 * l),
                fine_reach: rule.cfg.fine_reach.max(t + 40.0 * l),
                w_max: rule.cfg.w_max.max(2.0 * (t + 40.0 * l)),
                ..rule.cfg
            },
        )?;
        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut out = [0.0; 4];
        for &g in &grid.points {
            build_rule.se_sections(kernel, g, 0, &mut out)?;
            for (col, v) in cols.iter_mut().zip(out) {
                col.push(v);
            }
        }
        let [z0, z1, z2, z3] = cols;
        let profiles = [
            Profile::new(z0, z1.clone(), false, 1.0 + alpha),
            Profile::new(z1, z2.clone(), true, 2.0 + alpha),
            Profile::new(z2, z3, false, 3.0 + alpha),
        ];
        let coarse_rule = JumpRule::new(
            alpha,
            &QuadConfig {
                w_min: l / 32.0,
                ..rule.cfg
            },
        )?;
        let mut peak = [0.0; 2];
        rule.se_sections(kernel, 0.0, 2, &mut peak)?;
        let profile_scale = [
            peak[0].abs() * 1e-3,
            peak[1].abs().max(peak[0].abs() / l) * 1e-3,
        ];
        Ok(Self {
            kernel: *kernel,
            rule: rule.clone(),
            grid,
            profiles,
            coarse_rule,
            profile_scale,
            second: OnceLock::new(),
        })
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn alpha(&self) -> f64 {
        self.rule.alpha()
    }

    /// Interpolated `Z(δ)`.
    pub fn value(&self, delta: f64) -> f64 {
        self.profiles[0].eval(&self.grid, delta)
    }

    /// Interpolated `Z^{(order)}(δ)` for `order ≤ 2`.
    pub fn derivative(&self, order: usize, delta: f64) -> f64 {
        self.profiles[order].eval(&self.grid, delta)
    }

    fn jump_of_profile(&self, order: usize, delta: f64) -> Result<f64> {
        let mut taylor = [0.0; 3];
        self.rule
            .se_sections(&self.kernel, delta, order + 2, &mut taylor)?;
        let section = TableSection {
            table: self,
            order,
            delta,
            curvature: taylor[0],
            fourth: taylor[2],
        };
        self.coarse_rule
            .integrate_with_scale(&section, self.profile_scale[order])
    }

    /// `J[Z](δ) = ∫ [Z(δ - w) - Z(δ)] ν_α(dw)`, the jump operator applied
    /// twice to the kernel profile, by direct quadrature over the table.
    pub fn second_jump(&self, delta: f64) -> Result<f64> {
        self.jump_of_profile(0, delta)
    }

    /// Interpolated `J[Z](δ)`. The interpolation table is built on first use.
    pub fn second_jump_interp(&self, delta: f64) -> Result<f64> {
        let profile = self.second.get_or_init(|| {
            let mut values = Vec::with_capacity(self.grid.points.len());
            let mut slopes = Vec::with_capacity(self.grid.points.len());
            for &g in &self.grid.points {
                values.push(self.jump_of_profile(0, g).map_err(|e| e.to_string())?);
                slopes.push(self.jump_of_profile(1, g).map_err(|e| e.to_string())?);
            }
            Ok(Profile::new(
                values,
                slopes,
                false,
                1.0 + 2.0 * self.alpha(),
            ))
        });
        match profile {
            Ok(p) => Ok(p.eval(&self.grid, delta)),
            Err(msg) => Err(Error::Convergence(msg.clone())),
        }
    }
}
