//! The simulate → burn-in → thin → fit → evaluate pipeline over a grid of
//! stability indices, sample sizes and seeds, with CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    fit_with_deadline, relative_entropy_rate, Deadline, EstimatorConfig, KernelChoice,
};
use crate::fields::{MatrixField, VectorField};
use crate::levy_noise::StableParams;
use crate::points::PointSet;
use crate::sde_sim::{simulate, SdeModel, Trajectory};

/// Evenly spaced evaluation points `start, …, end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            start: -2.0,
            end: 2.0,
            count: 81,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite() && self.start < self.end) {
            return Err(Error::domain("eval_grid", "need finite start < end"));
        }
        if self.count < 2 {
            return Err(Error::domain("eval_grid", "need at least two points"));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let h = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| {
                if i + 1 == self.count {
                    self.end
                } else {
                    self.start + h * i as f64
                }
            })
            .collect()
    }
}

/// A one-dimensional model `dX = g(X) dt + σ dW + scale · dL^α`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Drift preset, e.g. `"double_well"` or `{"polynomial": {"coeffs": [0, 1, 0, -1]}}`.
    pub model: VectorField,
    pub sigma: f64,
    /// `None` switches the jumps off.
    pub alpha: Option<f64>,
    pub jump_scale: f64,
    pub x0: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            model: VectorField::DoubleWell,
            sigma: 1.0,
            alpha: Some(1.5),
            jump_scale: 1.0,
            x0: 1.0,
            dt: 0.001,
            n_steps: 6000,
            seed: 0,
        }
    }
}

impl SimulateConfig {
    pub fn sde_model(&self) -> Result<SdeModel> {
        build_model(&self.model, self.sigma, self.alpha, self.jump_scale)
    }

    pub fn run(&self) -> Result<Trajectory> {
        if self.n_steps == 0 {
            return Err(Error::domain("n_steps", "must be positive"));
        }
        simulate(
            &self.sde_model()?,
            &[self.x0],
            self.dt,
            self.n_steps,
            self.seed,
        )
    }
}

fn build_model(
    drift: &VectorField,
    sigma: f64,
    alpha: Option<f64>,
    scale: f64,
) -> Result<SdeModel> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(
            "sigma",
            format!("must be non-negative, got {sigma}"),
        ));
    }
    if let VectorField::Custom(_) = drift {
        return Err(Error::Config(
            "custom drifts cannot be configured from a file".into(),
        ));
    }
    Ok(SdeModel {
        drift: drift.clone(),
        diffusion: MatrixField::Scalar(sigma),
        stable: alpha.map(|a| StableParams::new(a, scale)).transpose()?,
        dim: 1,
    })
}

/// Settings for fitting one stored trajectory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub estimator: EstimatorConfig,
    pub eval_grid: GridSpec,
    /// Leading fraction of the path dropped before fitting.
    pub burn_in: f64,
}

impl EstimateConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.eval_grid.validate()?;
        if !(0.0..1.0).contains(&cfg.burn_in) {
            return Err(Error::domain("burn_in", "must lie in [0, 1)"));
        }
        Ok(cfg)
    }
}

/// Number of modes of a one-dimensional sample: local maxima above a fifth
/// of the peak in a smoothed 40-bin histogram over the 1%–99% quantile range.
pub fn histogram_modes(values: &[f64]) -> usize {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 10 {
        return v.len().min(1);
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    let (lo, hi) = (q(0.01), q(0.99));
    if hi <= lo {
        return 1;
    }
    const BINS: usize = 40;
    let mut h = vec![0.0; BINS];
    for &x in &v {
        if (lo..=hi).contains(&x) {
            let b = (((x - lo) / (hi - lo)) * BINS as f64) as usize;
            h[b.min(BINS - 1)] += 1.0;
        }
    }
    for _ in 0..2 {
        h = (0..BINS)
            .map(|i| {
                let a = if i > 0 { h[i - 1] } else { h[i] };
                let c = if i + 1 < BINS { h[i + 1] } else { h[i] };
                (a + h[i] + c) / 3.0
            })
            .collect();
    }
    let peak = h.iter().cloned().fold(0.0, f64::max);
    let mut modes = 0;
    let mut i = 0;
    while i < BINS {
        // plateaus count once
        let mut j = i;
        while j + 1 < BINS && h[j + 1] == h[i] {
            j += 1;
        }
        let left = i == 0 || h[i - 1] < h[i];
        let right = j + 1 == BINS || h[j + 1] < h[i];
        if left && right && h[i] >= 0.2 * peak {
            modes += 1;
        }
        i = j + 1;
    }
    modes
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub alphas: Vec<f64>,
    /// Number of Euler steps per trajectory.
    pub sample_sizes: Vec<usize>,
    pub dt: f64,
    pub seeds: Vec<u64>,
    /// The true drift.
    pub model: VectorField,
    pub sigma: f64,
    pub jump_scale: f64,
    pub x0: f64,
    /// Leading fraction of every path dropped before estimation.
    pub burn_in: f64,
    /// Keep every `stride`-th state after burn-in.
    pub stride: usize,
    pub eval_grid: GridSpec,
    /// Estimator settings. `alpha`, `jump_scale` and `diffusion` are
    /// replaced by the values of each cell's model.
    pub estimator: EstimatorConfig,
    pub cell_time_limit_secs: u64,
}

/// Lengthscale multiplier used by the double-well grid when no estimator is given.
/// Tuned on seeds 100-119, away from the default seeds.
pub const DEFAULT_MEDIAN_MULTIPLIER: f64 = 8.0;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alphas: vec![1.0, 1.25, 1.5, 1.75],
            sample_sizes: vec![6000, 10000],
            dt: 0.001,
            seeds: (0..5).collect(),
            model: VectorField::DoubleWell,
            sigma: 1.0,
            jump_scale: 1.0,
            x0: 1.0,
            burn_in: 0.1,
            stride: 1,
            eval_grid: GridSpec::default(),
            estimator: EstimatorConfig {
                kernel: KernelChoice {
                    median_multiplier: DEFAULT_MEDIAN_MULTIPLIER,
                    ..Default::default()
                },
                ..Default::default()
            },
            cell_time_limit_secs: 600,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.sample_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "alphas, sample_sizes and seeds must be nonempty".into(),
            ));
        }
        for &a in &self.alphas {
            StableParams::new(a, 1.0)?;
        }
        if self.sample_sizes.contains(&0) {
            return Err(Error::domain("sample_sizes", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::domain(
                "dt",
                format!("must be positive, got {}", self.dt),
            ));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::domain("burn_in", "must lie in [0, 1)"));
        }
        if self.stride == 0 {
            return Err(Error::domain("stride", "must be positive"));
        }
        if self.cell_time_limit_secs == 0 {
            return Err(Error::domain("cell_time_limit_secs", "must be positive"));
        }
        self.eval_grid.validate()?;
        build_model(&self.model, self.sigma, None, self.jump_scale)?;
        if !(self.jump_scale > 0.0 && self.jump_scale.is_finite()) {
            return Err(Error::domain("jump_scale", "must be positive"));
        }
        self.estimator_for(self.alphas[0]).validate(1)
    }

    /// Estimator settings for one stability index. At α = 2 the jumps are
    /// Gaussian with variance `2·scale²` and join the diffusion.
    pub fn estimator_for(&self, alpha: f64) -> EstimatorConfig {
        let mut cfg = self.estimator.clone();
        let mut d = self.sigma * self.sigma;
        if alpha < 2.0 {
            cfg.alpha = Some(alpha);
        } else {
            cfg.alpha = None;
            d += 2.0 * self.jump_scale * self.jump_scale;
        }
        cfg.jump_scale = self.jump_scale;
        cfg.diffusion = MatrixField::Scalar(d);
        cfg
    }

    pub fn cells(&self) -> Vec<(f64, usize, u64)> {
        let mut out = Vec::new();
        for &a in &self.alphas {
            for &n in &self.sample_sizes {
                for &s in &self.seeds {
                    out.push((a, n, s));
                }
            }
        }
        out
    }
}

/// Drift curve of one cell on the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub x: Vec<f64>,
    pub true_drift: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub rmse: f64,
    pub relative_entropy_rate_error: f64,
    pub c_used: f64,
    pub lengthscale_used: f64,
    pub curve: Curve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub tag: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub wall_time: f64,
    pub outcome: std::result::Result<CellMetrics, CellFailure>,
}

/// Seed average over the successful cells of one `(α, n)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub alpha: f64,
    pub n: usize,
    pub cells_ok: usize,
    pub cells_total: usize,
    pub mean_rmse: f64,
    pub mean_relative_entropy_rate_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
}

pub fn run_cell(config: &ExperimentConfig, alpha: f64, n: usize, seed: u64) -> CellResult {
    let start = Instant::now();
    let outcome = cell_metrics(config, alpha, n, seed).map_err(|e| CellFailure {
        tag: e.tag(),
        message: e.to_string(),
    });
    let wall_time = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(m) => info!(
            "α={alpha} n={n} seed={seed}: rmse {:.4} in {wall_time:.1} s",
            m.rmse
        ),
        Err(f) => warn!("α={alpha} n={n} seed={seed}: {}", f.message),
    }
    CellResult {
        alpha,
        n,
        seed,
        wall_time,
        outcome,
    }
}

fn cell_metrics(config: &ExperimentConfig, alpha: f64, n: usize, seed: u64) -> Result<CellMetrics> {
    let deadline = Deadline::after(Duration::from_secs(config.cell_time_limit_secs));
    let model = build_model(&config.model, config.sigma, Some(alpha), config.jump_scale)?;
    let traj = simulate(&model, &[config.x0], config.dt, n, seed)?;
    let data = traj
        .discard_burn_in(config.burn_in)?
        .thin(config.stride)
        .states;
    let est_cfg = config.estimator_for(alpha);
    let fitted = fit_with_deadline(&data, &est_cfg, Some(&deadline))?;

    let x = config.eval_grid.points();
    let grid = PointSet::from_scalars(&x);
    let estimate: Vec<f64> = fitted.drift_on(&grid)?.into_iter().map(|v| v[0]).collect();
    let true_drift: Vec<f64> = x.iter().map(|&v| config.model.eval(&[v])[0]).collect();
    let rmse = (estimate
        .iter()
        .zip(&true_drift)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
        .sqrt();
    deadline.check()?;

    let entropy = relative_entropy_rate(
        |p| {
            let est = fitted.drift_at(p).map_or(f64::NAN, |v| v[0]);
            vec![config.model.eval(p)[0] - est]
        },
        &data,
        &est_cfg.diffusion,
    )?;
    if !(rmse.is_finite() && entropy.is_finite()) {
        return Err(Error::DegenerateData("non-finite error metric".into()));
    }
    Ok(CellMetrics {
        rmse,
        relative_entropy_rate_error: entropy,
        c_used: fitted.config().c,
        lengthscale_used: fitted.kernel().lengthscale,
        curve: Curve {
            x,
            true_drift,
            estimate,
        },
    })
}

/// Runs every cell in parallel; the report keeps the configured order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let cells = config
        .cells()
        .into_par_iter()
        .map(|(a, n, s)| run_cell(config, a, n, s))
        .collect();
    Ok(ExperimentReport { cells })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

impl ExperimentReport {
    pub fn report_csv(&self) -> String {
        let mut out = String::from(
            "alpha,n,seed,rmse,relative_entropy_rate_error,C_used,lengthscale_used,wall_time,status\n",
        );
        for c in &self.cells {
            let m = c.outcome.as_ref().ok();
            let status = c.outcome.as_ref().err().map_or("ok", |f| f.tag);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3},{}",
                c.alpha,
                c.n,
                c.seed,
                fmt_opt(m.map(|m| m.rmse)),
                fmt_opt(m.map(|m| m.relative_entropy_rate_error)),
                fmt_opt(m.map(|m| m.c_used)),
                fmt_opt(m.map(|m| m.lengthscale_used)),
                c.wall_time,
                status
            )
            .unwrap();
        }
        out
    }

    /// One row per `(α, n)` in configured order.
    pub fn trends(&self) -> Vec<TrendRow> {
        let mut keys: Vec<(f64, usize)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|&(a, n)| a == c.alpha && n == c.n) {
                keys.push((c.alpha, c.n));
            }
        }
        keys.into_iter()
            .map(|(alpha, n)| {
                let group: Vec<&CellResult> = self
                    .cells
                    .iter()
                    .filter(|c| c.alpha == alpha && c.n == n)
                    .collect();
                let ok: Vec<&CellMetrics> = group
                    .iter()
                    .filter_map(|c| c.outcome.as_ref().ok())
                    .collect();
                let mean = |f: fn(&CellMetrics) -> f64| {
                    if ok.is_empty() {
                        f64::NAN
                    } else {
                        ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                    }
                };
                TrendRow {
                    alpha,
                    n,
                    cells_ok: ok.len(),
                    cells_total: group.len(),
                    mean_rmse: mean(|m| m.rmse),
                    mean_relative_entropy_rate_error: mean(|m| m.relative_entropy_rate_error),
                }
            })
            .collect()
    }

    pub fn trend_csv(&self) -> String {
        let mut out = String::from(
            "alpha,n,cells_ok,cells_total,mean_rmse,mean_relative_entropy_rate_error\n",
        );
        for t in self.trends() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t.alpha,
                t.n,
                t.cells_ok,
                t.cells_total,
                t.mean_rmse,
                t.mean_relative_entropy_rate_error
            )
            .unwrap();
        }
        out
    }

    pub fn curve_file_name(alpha: f64, n: usize, seed: u64) -> String {
        format!("curve_alpha{alpha}_n{n}_seed{seed}.csv")
    }

    /// Writes `report.csv`, `trend_summary.csv` and `curves/*.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let curves = dir.join("curves");
        fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
        let write = |path: std::path::PathBuf, text: String| {
            fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write(dir.join("report.csv"), self.report_csv())?;
        write(dir.join("trend_summary.csv"), self.trend_csv())?;
        for c in &self.cells {
            if let Ok(m) = &c.outcome {
                let mut text = String::from("x,true_drift,drift_est\n");
                for ((x, t), e) in m
                    .curve
                    .x
                    .iter()
                    .zip(&m.curve.true_drift)
                    .zip(&m.curve.estimate)
                {
                    writeln!(text, "{x},{t},{e}").unwrap();
                }
                write(
                    curves.join(Self::curve_file_name(c.alpha, c.n, c.seed)),
                    text,
                )?;
            }
        }
        Ok(())
    }
}

/// Zero crossings of a sampled curve, located by linear interpolation.
pub fn zero_crossings(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..x.len().saturating_sub(1) {
        let (a, b) = (y[i], y[i + 1]);
        if a == 0.0 {
            out.push(x[i]);
        } else if a * b < 0.0 {
            out.push(x[i] - a * (x[i + 1] - x[i]) / (b - a));
        }
    }
    if y.last() == Some(&0.0) {
        out.push(x[x.len() - 1]);
    }
    out
}

/// `‖even part‖ / ‖odd part‖` of a curve on a grid symmetric about 0;
/// `None` when the grid is not symmetric.
pub fn even_to_odd_ratio(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let symmetric = (0..n).all(|i| (x[i] + x[n - 1 - i]).abs() <= 1e-9 * (1.0 + x[i].abs()));
    if !symmetric || n == 0 {
        return None;
    }
    let (mut even, mut odd) = (0.0, 0.0);
    for i in 0..n {
        let (a, b) = (y[i], y[n - 1 - i]);
        even += 0.25 * (a + b) * (a + b);
        odd += 0.25 * (a - b) * (a - b);
    }
    Some((even / odd).sqrt())
}

/// Odd-symmetric shape (even part at most half the odd part) whose zero
/// crossings all lie within `tol` of `roots`, with every root matched.
pub fn matches_root_pattern(curve: &Curve, roots: &[f64], tol: f64) -> bool {
    let crossings = zero_crossings(&curve.x, &curve.estimate);
    let odd = even_to_odd_ratio(&curve.x, &curve.estimate).is_some_and(|r| r <= 0.5);
    let all_near = crossings
        .iter()
        .all(|c| roots.iter().any(|r| (c - r).abs() <= tol));
    let all_hit = roots
        .iter()
        .all(|r| crossings.iter().any(|c| (c - r).abs() <= tol));
    odd && all_near && all_hit
}
