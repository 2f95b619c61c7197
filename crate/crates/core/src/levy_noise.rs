//! Symmetric α-stable variates and the Lévy jump measure
//! `ν_α(dy) = c(d,α) ‖y‖^{-(d+α)} dy`.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// Stability index and scale of the jump noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableParams {
    pub alpha: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl StableParams {
    pub fn new(alpha: f64, scale: f64) -> Result<Self> {
        let params = Self { alpha, scale };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha, true)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::domain(
                "scale",
                format!("must be positive, got {}", self.scale),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64, allow_two: bool) -> Result<()> {
    let ok = if allow_two {
        alpha > 0.0 && alpha <= 2.0
    } else {
        alpha > 0.0 && alpha < 2.0
    };
    if ok {
        Ok(())
    } else {
        let range = if allow_two { "(0, 2]" } else { "(0, 2)" };
        Err(Error::domain(
            "alpha",
            format!("must lie in {range}, got {alpha}"),
        ))
    }
}

/// Normalising constant `c(d,α) = α Γ((d+α)/2) / (2^{1-α} π^{d/2} Γ(1-α/2))`.
///
/// With this constant the jump measure has characteristic exponent `-|ξ|^α`,
/// matching [`StandardStable`].
pub fn c_alpha(d: usize, alpha: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::domain("d", "dimension must be at least 1"));
    }
    check_alpha(alpha, false)?;
    let n = d as f64;
    Ok(alpha * gamma((n + alpha) / 2.0)
        / (2f64.powf(1.0 - alpha) * PI.powf(n / 2.0) * gamma(1.0 - alpha / 2.0)))
}

/// Density of `ν_α` with respect to Lebesgue measure at `y ≠ 0`.
///
/// The `scale` of `params` is not part of the measure; it only multiplies
/// simulated increments.
pub fn levy_measure_density(y: &[f64], params: &StableParams) -> Result<f64> {
    let d = y.len();
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::domain(
            "y",
            "the jump measure is singular at the origin",
        ));
    }
    let c = c_alpha(d, params.alpha)?;
    Ok(c * norm.powf(-(d as f64 + params.alpha)))
}

/// Surface area of the unit sphere in ℝ^d (2 for d = 1).
pub fn unit_sphere_area(d: usize) -> f64 {
    let n = d as f64;
    2.0 * PI.powf(n / 2.0) / gamma(n / 2.0)
}

/// Standard symmetric α-stable law with characteristic function
/// `exp(-|t|^α)`, sampled by Chambers–Mallows–Stuck.
#[derive(Debug, Clone, Copy)]
pub struct StandardStable {
    alpha: f64,
}

impl StandardStable {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha, true)?;
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Distribution<f64> for StandardStable {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let alpha = self.alpha;
        if alpha == 2.0 {
            let z: f64 = StandardNormal.sample(rng);
            return std::f64::consts::SQRT_2 * z;
        }
        let u = PI * (rng.random::<f64>() - 0.5);
        if alpha == 1.0 {
            return u.tan();
        }
        // keep U strictly inside (-π/2, π/2)
        let u = u.clamp(-FRAC_PI_2 + 1e-15, FRAC_PI_2 - 1e-15);
        let e: f64 = Exp1.sample(rng);
        let head = (alpha * u).sin() / u.cos().powf(1.0 / alpha);
        let tail = (((1.0 - alpha) * u).cos() / e).powf((1.0 - alpha) / alpha);
        head * tail
    }
}

/// One draw of a standard symmetric α-stable variate.
pub fn sample_standard_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    Ok(StandardStable::new(alpha)?.sample(rng))
}
