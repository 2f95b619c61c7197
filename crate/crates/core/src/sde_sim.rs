//! Euler–Maruyama simulation of `dX = g(X) dt + σ(X) dB + dL^α` and the
//! trajectory CSV format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fields::{MatrixField, VectorField};
use crate::levy_noise::{StableParams, StandardStable};
use crate::points::PointSet;

/// Drift, noise matrix and jump noise of an SDE in ℝ^d.
#[derive(Debug, Clone)]
pub struct SdeModel {
    pub drift: VectorField,
    /// σ(x), a d × k matrix.
    pub diffusion: MatrixField,
    /// `None` disables the jump term.
    pub stable: Option<StableParams>,
    pub dim: usize,
}

impl SdeModel {
    /// The double-well benchmark `dX = (X - X³) dt + dW + dL^α` in one dimension.
    pub fn double_well(alpha: f64) -> Result<Self> {
        Ok(Self {
            drift: VectorField::DoubleWell,
            diffusion: MatrixField::Scalar(1.0),
            stable: Some(StableParams::new(alpha, 1.0)?),
            dim: 1,
        })
    }

    /// `dX = -θ X dt + σ dW` in one dimension.
    pub fn ornstein_uhlenbeck(theta: f64, sigma: f64) -> Self {
        Self {
            drift: VectorField::Linear { slope: -theta },
            diffusion: MatrixField::Scalar(sigma),
            stable: None,
            dim: 1,
        }
    }

    /// `D(x) = σ(x) σ(x)ᵀ`.
    pub fn diffusion_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let s = self.diffusion.eval(x);
        &s * s.transpose()
    }

    pub fn describe(&self) -> String {
        let jumps = match &self.stable {
            Some(p) => format!("alpha={} scale={}", p.alpha, p.scale),
            None => "no jumps".into(),
        };
        format!(
            "drift={} sigma={:?} {jumps} dim={}",
            self.drift.describe(),
            self.diffusion,
            self.dim
        )
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::domain("dim", "must be at least 1"));
        }
        self.diffusion.validate(self.dim, false)?;
        if let Some(p) = &self.stable {
            p.validate()?;
        }
        Ok(())
    }
}

/// A sampled path `X_0, X_dt, X_2dt, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub seed: u64,
    pub states: PointSet,
    pub model_meta: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.dim()
    }

    /// Keeps every `stride`-th state; the time step grows by the same factor.
    pub fn thin(&self, stride: usize) -> Trajectory {
        let stride = stride.max(1);
        Trajectory {
            dt: self.dt * stride as f64,
            seed: self.seed,
            states: self.states.stride(stride),
            model_meta: self.model_meta.clone(),
        }
    }

    /// Drops the leading `fraction` of the states.
    pub fn discard_burn_in(&self, fraction: f64) -> Result<Trajectory> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::domain(
                "burn_in",
                format!("must lie in [0, 1), got {fraction}"),
            ));
        }
        let skip = (self.len() as f64 * fraction).floor() as usize;
        Ok(Trajectory {
            dt: self.dt,
            seed: self.seed,
            states: self.states.slice(skip, self.len()),
            model_meta: self.model_meta.clone(),
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.len() * 26 * self.dim() + 64);
        writeln!(
            out,
            "# dt={:e} seed={} dim={}",
            self.dt,
            self.seed,
            self.dim()
        )
        .unwrap();
        for row in self.states.rows() {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut traj = Self::parse_csv(&text)?;
        traj.model_meta = format!("loaded from {}", path.display());
        Ok(traj)
    }

    pub fn parse_csv(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "no header".into(),
        })?;
        let (dt, seed, dim) = parse_header(header)?;
        let mut states = PointSet::new(dim, Vec::new())?;
        let mut row = Vec::with_capacity(dim);
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            row.clear();
            for cell in line.split(',') {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    reason: format!("row {line_no}: non-numeric cell {cell:?}"),
                })?;
                row.push(v);
            }
            if row.len() != dim {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("row {line_no}: expected {dim} values, found {}", row.len()),
                });
            }
            states.push(&row);
        }
        if states.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                reason: "a trajectory needs at least two states".into(),
            });
        }
        Ok(Trajectory {
            dt,
            seed,
            states,
            model_meta: String::new(),
        })
    }
}

fn parse_header(header: &str) -> Result<(f64, u64, usize)> {
    let bad = |reason: String| Error::Parse { line: 1, reason };
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| bad("no header".into()))?;
    let (mut dt, mut seed, mut dim) = (None, None, None);
    for field in body.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed header field {field:?}")))?;
        let err = |_| bad(format!("invalid value for {key}: {value:?}"));
        match key {
            "dt" => dt = Some(value.parse::<f64>().map_err(|e| err(e.to_string()))?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(e.to_string()))?),
            "dim" => dim = Some(value.parse::<usize>().map_err(|e| err(e.to_string()))?),
            _ => return Err(bad(format!("unknown header field {key:?}"))),
        }
    }
    match (dt, seed, dim) {
        (Some(dt), Some(seed), Some(dim)) if dt > 0.0 && dim > 0 => Ok((dt, seed, dim)),
        _ => Err(bad("header must carry positive dt, seed and dim".into())),
    }
}

/// Euler–Maruyama with stable increments scaled by `dt^{1/α}`:
///
/// `X_{i+1} = X_i + g(X_i) dt + σ(X_i) √dt ξ_i + dt^{1/α} · scale · ζ_i`.
///
/// Returns the `n_steps + 1` states including `x0`.
pub fn simulate(
    model: &SdeModel,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    model.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::domain("dt", format!("must be positive, got {dt}")));
    }
    let d = model.dim;
    if x0.len() != d {
        return Err(Error::domain("x0", format!("expected {d} components")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sqrt_dt = dt.sqrt();
    let jumps = match &model.stable {
        Some(p) => Some((
            StandardStable::new(p.alpha)?,
            dt.powf(1.0 / p.alpha) * p.scale,
        )),
        None => None,
    };
    let constant_sigma = match &model.diffusion {
        MatrixField::Custom(_) => None,
        other => Some(other.eval(x0)),
    };
    let k = constant_sigma
        .as_ref()
        .map_or_else(|| model.diffusion.eval(x0).ncols(), |s| s.ncols());

    let mut states = PointSet::new(d, Vec::with_capacity((n_steps + 1) * d))?;
    states.push(x0);
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; d];
    let mut xi = vec![0.0; k];
    for step in 1..=n_steps {
        model.drift.eval_into(&x, &mut drift);
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let sigma_owned;
        let sigma = match &constant_sigma {
            Some(s) => s,
            None => {
                sigma_owned = model.diffusion.eval(&x);
                &sigma_owned
            }
        };
        let mut next = x.clone();
        for a in 0..d {
            let noise: f64 = (0..k).map(|b| sigma[(a, b)] * xi[b]).sum();
            next[a] += drift[a] * dt + noise * sqrt_dt;
        }
        if let Some((dist, jump_scale)) = &jumps {
            for v in next.iter_mut() {
                *v += jump_scale * dist.sample(&mut rng);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        states.push(&next);
        x = next;
    }
    Ok(Trajectory {
        dt,
        seed,
        states,
        model_meta: model.describe(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(drift: VectorField) -> SdeModel {
        SdeModel {
            drift,
            diffusion: MatrixField::Scalar(0.0),
            stable: None,
            dim: 1,
        }
    }

    #[test]
    fn no_dynamics_is_constant() {
        let t = simulate(&quiet(VectorField::Zero), &[1.5], 0.01, 50, 3).unwrap();
        assert_eq!(t.len(), 51);
        assert!(t.states.as_slice().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn deterministic_linear_decay() {
        let t = simulate(
            &quiet(VectorField::Linear { slope: -1.0 }),
            &[1.0],
            0.1,
            10,
            0,
        )
        .unwrap();
        let last = t.states.row(10)[0];
        assert!((last - 0.348_678_440_1).abs() < 1e-12, "{last}");
    }

    #[test]
    fn rejects_bad_step() {
        let m = quiet(VectorField::Zero);
        assert!(matches!(
            simulate(&m, &[0.0], 0.0, 5, 0),
            Err(Error::Domain { param: "dt", .. })
        ));
        assert!(simulate(&m, &[0.0], -1.0, 5, 0).is_err());
    }

    #[test]
    fn overflow_reports_step() {
        let m = quiet(VectorField::Polynomial {
            coeffs: vec![0.0, 0.0, 0.0, 1.0],
        });
        match simulate(&m, &[10.0], 0.5, 100, 0) {
            Err(Error::NonFiniteState { step }) => assert!(step > 1 && step < 100),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_path() {
        let m = SdeModel::double_well(1.25).unwrap();
        let a = simulate(&m, &[1.0], 0.001, 2000, 9).unwrap();
        let b = simulate(&m, &[1.0], 0.001, 2000, 9).unwrap();
        let c = simulate(&m, &[1.0], 0.001, 2000, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn ou_stationary_variance() {
        let m = SdeModel::ornstein_uhlenbeck(1.0, 1.0);
        let t = simulate(&m, &[0.0], 0.01, 100_000, 4).unwrap();
        let half: Vec<f64> = t.states.as_slice()[50_000..].to_vec();
        let mean = half.iter().sum::<f64>() / half.len() as f64;
        let var = half.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / half.len() as f64;
        assert!((var - 0.5).abs() < 0.15 * 0.5, "variance {var}");
    }

    #[test]
    fn gaussian_stable_increment_scaling() {
        let dt = 0.01;
        let increments = |scale: f64| {
            let m = SdeModel {
                drift: VectorField::Zero,
                diffusion: MatrixField::Scalar(0.0),
                stable: Some(StableParams::new(2.0, scale).unwrap()),
                dim: 1,
            };
            let t = simulate(&m, &[0.0], dt, 100_000, 21).unwrap();
            let s = t.states.as_slice();
            let inc: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
            inc.iter().map(|v| v * v).sum::<f64>() / inc.len() as f64
        };
        let (v1, v2) = (increments(0.5), increments(1.0));
        // α = 2 increments are N(0, 2·scale²·dt)
        assert!((v1 / (2.0 * 0.25 * dt) - 1.0).abs() < 0.05, "{v1}");
        assert!((v2 / (2.0 * dt) - 1.0).abs() < 0.05, "{v2}");
        assert!((v2 / v1 / 4.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn double_well_is_bimodal() {
        let m = SdeModel::double_well(1.5).unwrap();
        let t = simulate(&m, &[1.0], 0.001, 6000, 7).unwrap();
        assert_eq!(t.len(), 6001);
        let near = |c: f64| {
            t.states
                .as_slice()
                .iter()
                .filter(|v| (*v - c).abs() < 0.5)
                .count()
        };
        let mid = t.states.as_slice().iter().filter(|v| v.abs() < 0.2).count();
        assert!(
            near(1.0) > mid,
            "mass near +1 should exceed mass at the barrier"
        );
    }

    #[test]
    fn thinning() {
        let m = SdeModel::ornstein_uhlenbeck(1.0, 1.0);
        let t = simulate(&m, &[0.0], 0.01, 10_000, 1).unwrap();
        assert_eq!(t.thin(1), t);
        let th = t.thin(10);
        assert_eq!(th.len(), 1001);
        assert!((th.dt - 0.1).abs() < 1e-15);
        for i in 0..th.len() {
            assert_eq!(th.states.row(i), t.states.row(10 * i));
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let m = SdeModel::double_well(1.75).unwrap();
        let t = simulate(&m, &[1.0], 0.001, 500, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        t.save_csv(&path).unwrap();
        let back = Trajectory::load_csv(&path).unwrap();
        assert_eq!(back.dt.to_bits(), t.dt.to_bits());
        assert_eq!(back.seed, 77);
        assert!(back
            .states
            .as_slice()
            .iter()
            .zip(t.states.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        match Trajectory::parse_csv("") {
            Err(Error::Parse { reason, .. }) => assert_eq!(reason, "no header"),
            other => panic!("{other:?}"),
        }
        match Trajectory::parse_csv("# dt=0.1 seed=1 dim=1\n0.5\nabc\n1.0\n") {
            Err(Error::Parse { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("row 3"));
            }
            other => panic!("{other:?}"),
        }
        assert!(Trajectory::parse_csv("0.1\n0.2\n").is_err());
    }
}
