use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::kernel::KernelParams;
use crate::sde_sim::{simulate, SdeModel};
use crate::singular_quadrature::{jump_integral_1d, FnSection};

fn gaussian(n: usize, sd: f64, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    PointSet::from_scalars(&xs)
}

fn ou_path(n: usize, seed: u64) -> PointSet {
    let m = SdeModel::ornstein_uhlenbeck(1.0, 1.0);
    let t = simulate(&m, &[0.0], 0.01, n, seed).unwrap();
    t.discard_burn_in(0.1).unwrap().states
}

fn jumps(alpha: f64) -> EstimatorConfig {
    EstimatorConfig {
        alpha: Some(alpha),
        ..Default::default()
    }
}

fn grid() -> Vec<f64> {
    (0..17).map(|i| -2.0 + 0.25 * i as f64).collect()
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-300)
}

#[test]
fn vanishing_c_returns_the_known_drift() {
    let data = gaussian(120, 0.8, 1);
    let cfg = EstimatorConfig {
        c: 1e-12,
        known_drift: VectorField::Linear { slope: -0.3 },
        ..jumps(1.5)
    };
    let f = fit(&data, &cfg).unwrap();
    assert!(f.gradients_at_points().norm() <= 1e-8);
    for x in grid() {
        assert!(f.psi_at(&[x]).unwrap().abs() <= 1e-8);
        let g = f.drift_at(&[x]).unwrap()[0];
        assert!((g + 0.3 * x).abs() < 1e-8, "{x}: {g}");
    }
}

#[test]
fn ou_slope_is_recovered() {
    let data = ou_path(10_000, 4);
    let cfg = EstimatorConfig {
        max_points: 500,
        kernel: KernelChoice {
            median_multiplier: 5.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let f = fit(&data, &cfg).unwrap();
    let xs: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f.drift_at(&[x]).unwrap()[0]).collect();
    let slope =
        xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / xs.iter().map(|x| x * x).sum::<f64>();
    assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
}

#[test]
fn symmetric_data_give_an_odd_drift() {
    let half = gaussian(60, 1.0, 2);
    let mut both = half.as_slice().to_vec();
    both.extend(half.as_slice().iter().map(|v| -v));
    let data = PointSet::from_scalars(&both);
    let f = fit(&data, &jumps(1.5)).unwrap();
    let scale = f.drift_at(&[1.0]).unwrap()[0].abs();
    assert!(f.drift_at(&[0.0]).unwrap()[0].abs() <= 1e-9 * scale);
    for x in grid() {
        let a = f.drift_at(&[x]).unwrap()[0];
        let b = f.drift_at(&[-x]).unwrap()[0];
        assert!((a + b).abs() <= 1e-9 * scale, "{x}: {a} vs {b}");
    }
}

#[test]
fn reflected_data_reflect_the_fit() {
    let data = gaussian(80, 0.9, 3);
    let cfg = EstimatorConfig {
        known_drift: VectorField::DoubleWell,
        ..jumps(1.25)
    };
    let f = fit(&data, &cfg).unwrap();
    let g = fit(&data.negated(), &cfg).unwrap();
    for x in grid() {
        let a = f.drift_at(&[x]).unwrap()[0];
        let b = g.drift_at(&[-x]).unwrap()[0];
        assert!((a + b).abs() <= 1e-9 * (1.0 + a.abs()), "{x}: {a} vs {b}");
    }
}

#[test]
fn both_closed_forms_of_psi_agree() {
    let data = gaussian(150, 1.0, 5);
    let cfg = EstimatorConfig {
        c: 0.7,
        known_drift: VectorField::DoubleWell,
        ..jumps(1.5)
    };
    let f = fit(&data, &cfg).unwrap();
    let xs = PointSet::from_scalars(&grid());
    let other = f.psi_at_resubstituted(&xs).unwrap();
    let scale = other.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, b) in xs.rows().zip(&other) {
        let a = f.psi_at(x).unwrap();
        assert!(rel(a, *b, scale) < 1e-10, "{x:?}: {a} vs {b}");
    }
    assert!(f.system_residual().unwrap() <= RESIDUAL_TOL);
    assert!(f.diagnostics().relative_residual <= RESIDUAL_TOL);
}

#[test]
fn gradient_at_the_points_is_the_solution() {
    let data = gaussian(100, 1.0, 6);
    for cfg in [EstimatorConfig::default(), jumps(1.0)] {
        let f = fit(&data, &cfg).unwrap();
        let b = f.gradients_at_points();
        let scale = b.amax();
        for (i, x) in f.points().rows().enumerate() {
            let g = f.grad_psi_at(x).unwrap()[0];
            assert!(rel(g, b[i], scale) < 1e-8, "point {i}: {g} vs {}", b[i]);
        }
    }
}

#[test]
fn derivatives_match_finite_differences() {
    let data = gaussian(100, 1.0, 7);
    let cfg = EstimatorConfig {
        known_drift: VectorField::Linear { slope: 0.5 },
        ..jumps(1.5)
    };
    let f = fit(&data, &cfg).unwrap();
    let h = 1e-5;
    let probe = gaussian(50, 1.2, 8);
    let gscale = probe
        .rows()
        .map(|x| f.grad_psi_at(x).unwrap()[0].abs())
        .fold(0.0, f64::max);
    let hscale = probe
        .rows()
        .map(|x| f.hessian_psi_at(x).unwrap()[(0, 0)].abs())
        .fold(0.0, f64::max);
    for x in probe.rows() {
        let x = x[0];
        let fd = (f.psi_at(&[x + h]).unwrap() - f.psi_at(&[x - h]).unwrap()) / (2.0 * h);
        let g = f.grad_psi_at(&[x]).unwrap()[0];
        assert!(rel(fd, g, gscale) < 1e-5, "{x}: {fd} vs {g}");
        let fd2 =
            (f.grad_psi_at(&[x + h]).unwrap()[0] - f.grad_psi_at(&[x - h]).unwrap()[0]) / (2.0 * h);
        let hh = f.hessian_psi_at(&[x]).unwrap()[(0, 0)];
        assert!(rel(fd2, hh, hscale) < 1e-5, "{x}: {fd2} vs {hh}");
    }
}

#[test]
fn jump_term_matches_direct_quadrature() {
    let data = gaussian(60, 1.0, 9);
    let f = fit(&data, &jumps(1.5)).unwrap();
    let l = f.kernel().lengthscale;
    // ψ decays slowly, so reach far out
    let cfg = QuadConfig::for_kernel(l, 40.0);
    for x in [-1.3, 0.0, 0.4, 2.5] {
        let base = f.psi_at(&[x]).unwrap();
        let curvature = f.hessian_psi_at(&[x]).unwrap()[(0, 0)];
        let section = FnSection {
            f: |w: f64| f.psi_at(&[x + w]).unwrap() - base,
            curvature,
            far_field: -base,
            // ψ decays like |x|^{-1-α} away from the data
            tail: |r: f64| {
                4.0 * (f.psi_at(&[x + r]).unwrap().abs() + f.psi_at(&[x - r]).unwrap().abs())
            },
        };
        let direct = jump_integral_1d(&section, 1.5, &cfg).unwrap();
        let tabled = f.jump_psi_at(&[x]).unwrap();
        // table errors scale with the terms before they cancel
        let scale = 1.0 + f.gradients_at_points().abs().sum();
        assert!(
            rel(direct, tabled, scale) < 1e-6,
            "{x}: {direct} vs {tabled}"
        );
    }
}

#[test]
fn drift_is_affine_in_the_known_drift() {
    let data = gaussian(80, 1.0, 10);
    let with = |r: VectorField| {
        fit(
            &data,
            &EstimatorConfig {
                known_drift: r,
                ..jumps(1.75)
            },
        )
        .unwrap()
    };
    let f1 = with(VectorField::Polynomial {
        coeffs: vec![0.2, -1.0],
    });
    let f2 = with(VectorField::DoubleWell);
    let mix = with(VectorField::Polynomial {
        coeffs: vec![-0.2, 3.0, 0.0, -2.0],
    });
    // mix = 2·r2 - r1
    for x in grid() {
        let a = f1.drift_at(&[x]).unwrap()[0];
        let b = f2.drift_at(&[x]).unwrap()[0];
        let m = mix.drift_at(&[x]).unwrap()[0];
        assert!((m - (2.0 * b - a)).abs() <= 1e-9 * (1.0 + m.abs()), "{x}");
    }
}

#[test]
fn gradient_shifts_of_the_known_drift_wash_out_as_c_grows() {
    // moving ∇φ from r into ψ leaves the data term unchanged; only the
    // kernel penalty tells the two problems apart
    let data = gaussian(80, 1.0, 11);
    let k = KernelParams::new(0.8, 1.0).unwrap();
    let shifted = VectorField::custom(move |x, out| {
        out[0] = -x[0] - k.profile_derivative(1, x[0] - 0.3);
    });
    let gap = |c: f64| {
        let base = EstimatorConfig {
            c,
            known_drift: VectorField::Linear { slope: -1.0 },
            ..Default::default()
        };
        let f = fit(&data, &base).unwrap();
        let g = fit(
            &data,
            &EstimatorConfig {
                known_drift: shifted.clone(),
                ..base
            },
        )
        .unwrap();
        f.points()
            .rows()
            .map(|x| (f.drift_at(x).unwrap()[0] - g.drift_at(x).unwrap()[0]).abs())
            .fold(0.0, f64::max)
    };
    let (small, large) = (gap(0.1), gap(100.0));
    assert!(small > 1e-3, "{small}");
    assert!(large < 0.05 * small, "{small} -> {large}");
}

#[test]
fn artifact_round_trip_preserves_the_drift() {
    let data = gaussian(70, 1.0, 12);
    let cfg = EstimatorConfig {
        known_drift: VectorField::Polynomial {
            coeffs: vec![0.0, 1.0, 0.0, -1.0],
        },
        ..jumps(1.5)
    };
    let f = fit(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("est.json");
    f.save(&path).unwrap();
    let g = FittedEstimator::load(&path).unwrap();
    for x in grid() {
        assert_eq!(f.drift_at(&[x]).unwrap(), g.drift_at(&[x]).unwrap());
        assert_eq!(f.psi_at(&[x]).unwrap(), g.psi_at(&[x]).unwrap());
    }
    assert_eq!(f.diagnostics(), g.diagnostics());
    let text = f
        .to_json()
        .unwrap()
        .replace("\"version\": 1", "\"version\": 99");
    assert!(text.contains("\"version\": 99"));
    assert!(FittedEstimator::from_json(&text).is_err());
    assert!(FittedEstimator::load(dir.path().join("missing.json")).is_err());
}

#[test]
fn huge_c_is_refused_as_ill_conditioned() {
    let data = gaussian(200, 0.3, 13);
    let cfg = EstimatorConfig {
        c: 1e12,
        ..Default::default()
    };
    match fit(&data, &cfg) {
        Err(Error::Conditioning { estimate }) => assert!(estimate > MAX_CONDITION),
        other => panic!("expected a conditioning error, got {other:?}"),
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let data = gaussian(60, 1.0, 14);
    let bad = [
        EstimatorConfig {
            c: 0.0,
            ..Default::default()
        },
        EstimatorConfig {
            c: f64::NAN,
            ..Default::default()
        },
        EstimatorConfig {
            alpha: Some(2.0),
            ..Default::default()
        },
        EstimatorConfig {
            jump_scale: 0.0,
            ..jumps(1.0)
        },
        EstimatorConfig {
            max_points: 10,
            ..Default::default()
        },
        EstimatorConfig {
            a_mode: AMode::Identity { scale: -1.0 },
            ..Default::default()
        },
        EstimatorConfig {
            kernel: KernelChoice {
                median_multiplier: 0.0,
                ..Default::default()
            },
            ..Default::default()
        },
        EstimatorConfig {
            kernel: KernelChoice {
                lengthscale: Some(-1.0),
                ..Default::default()
            },
            ..Default::default()
        },
    ];
    for cfg in &bad {
        assert!(
            matches!(fit(&data, cfg), Err(Error::Domain { .. })),
            "{cfg:?}"
        );
    }
    let e = serde_json::from_str::<EstimatorConfig>(r#"{"C": 1, "lengthscale": 2}"#).unwrap_err();
    assert!(e.to_string().contains("lengthscale"));
    let cfg: EstimatorConfig = serde_json::from_str(r#"{"c": 2.5, "alpha": 1.5}"#).unwrap();
    assert_eq!((cfg.c, cfg.alpha), (2.5, Some(1.5)));
}

#[test]
fn degenerate_data_are_rejected() {
    let few = gaussian(MIN_POINTS - 1, 1.0, 15);
    assert!(matches!(
        fit(&few, &EstimatorConfig::default()),
        Err(Error::DegenerateData(_))
    ));
    let mut xs = gaussian(80, 1.0, 16).as_slice().to_vec();
    xs[7] = f64::NAN;
    let e = fit(&PointSet::from_scalars(&xs), &EstimatorConfig::default()).unwrap_err();
    assert!(matches!(e, Error::DegenerateData(_)));
    let f = fit(&gaussian(80, 1.0, 17), &EstimatorConfig::default()).unwrap();
    assert!(f.drift_at(&[0.0, 1.0]).is_err());
}

#[test]
fn thinning_respects_the_budget() {
    let data = gaussian(1000, 1.0, 18);
    let (t, s) = thin_for_estimation(&data, 300);
    assert_eq!(s, 4);
    assert_eq!(t.len(), 250);
    assert_eq!(t.row(1), data.row(4));
    let (same, one) = thin_for_estimation(&data, 5000);
    assert_eq!((same.len(), one), (1000, 1));
}

#[test]
fn a_equal_to_d_scales_the_drift() {
    let data = gaussian(80, 1.0, 19);
    let cfg = EstimatorConfig {
        a_mode: AMode::EqualToD,
        diffusion: MatrixField::Scalar(0.5),
        ..Default::default()
    };
    let f = fit(&data, &cfg).unwrap();
    for x in grid() {
        let g = f.drift_at(&[x]).unwrap()[0];
        let grad = f.grad_psi_at(&[x]).unwrap()[0];
        assert!((g - 0.5 * grad).abs() <= 1e-14 * (1.0 + g.abs()));
    }
}

#[test]
fn two_dimensional_fit_runs() {
    let a = gaussian(60, 1.0, 20);
    let b = gaussian(60, 0.5, 21);
    let rows: Vec<Vec<f64>> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| vec![*x, *y])
        .collect();
    let data = PointSet::from_rows(&rows).unwrap();
    let cfg = EstimatorConfig {
        mc_samples: 2000,
        ..jumps(1.5)
    };
    let f = fit(&data, &cfg).unwrap();
    assert!(f.diagnostics().relative_residual <= RESIDUAL_TOL);
    let g = f.drift_at(&[0.5, -0.2]).unwrap();
    assert_eq!(g.len(), 2);
    assert!(g.iter().all(|v| v.is_finite()));
    let h = f.hessian_psi_at(&[0.5, -0.2]).unwrap();
    assert!((h[(0, 1)] - h[(1, 0)]).abs() < 1e-12);
    assert!(matches!(
        f.jump_psi_at(&[0.0, 0.0]),
        Err(Error::Unsupported(_))
    ));
}

struct Quadratic;

impl Potential for Quadratic {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(-0.5 * x[0] * x[0])
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, -x[0]))
    }
    fn hessian(&self, _: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, -1.0))
    }
    fn is_bounded(&self) -> bool {
        false
    }
    fn jump_terms(&self, _: &PointSet, _: &EstimatorConfig) -> Result<Vec<f64>> {
        Err(Error::Unsupported("unbounded".into()))
    }
}

#[test]
fn functional_of_a_constant_is_zero() {
    let data = gaussian(200, 1.0, 22);
    let flat = BumpPotential {
        centers: PointSet::from_scalars(&[0.0, 1.0]),
        width: 0.5,
        weights: vec![0.0, 0.0],
    };
    for cfg in [EstimatorConfig::default(), jumps(1.5)] {
        assert_eq!(empirical_functional(&flat, &data, &cfg).unwrap(), 0.0);
    }
}

#[test]
fn functional_of_the_gaussian_score() {
    // per point ½x² - ½, which averages to zero
    let data = gaussian(10_000, 1.0, 23);
    let e = empirical_functional(&Quadratic, &data, &EstimatorConfig::default()).unwrap();
    assert!((e / data.len() as f64).abs() < 0.05, "{e}");
    let err = empirical_functional(&Quadratic, &data, &jumps(1.5)).unwrap_err();
    assert!(matches!(err, Error::Domain { param: "psi", .. }));
}

#[test]
fn functional_of_a_fit_is_deterministic_and_minimal() {
    let data = gaussian(120, 1.0, 24);
    let cfg = jumps(1.5);
    let f = fit(&data, &cfg).unwrap();
    let a = empirical_functional(&f, f.points(), &cfg).unwrap();
    let b = empirical_functional(&f, f.points(), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite() && a < 0.0, "{a}");
    let other = EstimatorConfig {
        jump_scale: 2.0,
        ..cfg
    };
    assert!(matches!(
        empirical_functional(&f, f.points(), &other),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn far_bump_stays_at_zero() {
    let data = gaussian(300, 1.0, 25);
    let centers = PointSet::from_scalars(&[40.0]);
    let p = fit_parametric_bumps(&data, &centers, 1.0, &EstimatorConfig::default()).unwrap();
    assert!(p.weights[0].abs() < 1e-6, "{:?}", p.weights);
}

#[test]
fn bumps_recover_an_ou_drift() {
    let data = ou_path(10_000, 26);
    let centers =
        PointSet::from_scalars(&(0..25).map(|k| -3.0 + 0.25 * k as f64).collect::<Vec<_>>());
    let cfg = EstimatorConfig::default();
    let p = fit_parametric_bumps(&data, &centers, 3.0, &cfg).unwrap();
    let g = PointSet::from_scalars(&(0..21).map(|i| -1.5 + 0.15 * i as f64).collect::<Vec<_>>());
    let err = rmse_on_grid(|x| vec![-x[0]], |x| p.drift_at(x, &cfg).unwrap(), &g);
    assert!(err < 0.2, "{err}");
    assert!(fit_parametric_bumps(&data, &PointSet::from_scalars(&[]), 1.0, &cfg).is_err());
    assert!(fit_parametric_bumps(&data, &centers, 0.0, &cfg).is_err());
    assert!(fit_parametric_bumps_with_ridge(&data, &centers, 1.0, &cfg, -1.0).is_err());
}

#[test]
fn bumps_with_jumps_lower_the_functional() {
    let data = gaussian(400, 1.0, 27);
    let centers = PointSet::from_scalars(&[-1.5, -0.5, 0.5, 1.5]);
    let cfg = jumps(1.5);
    let p = fit_parametric_bumps_with_ridge(&data, &centers, 1.0, &cfg, 0.0).unwrap();
    let at = empirical_functional(&p, &data, &cfg).unwrap();
    for k in 0..4 {
        let mut q = p.clone();
        q.weights[k] *= 1.1;
        assert!(empirical_functional(&q, &data, &cfg).unwrap() > at - 1e-9 * at.abs());
    }
}

#[test]
fn selection_picks_a_grid_member() {
    let data = ou_path(3000, 28);
    let cfg = EstimatorConfig {
        max_points: 300,
        ..Default::default()
    };
    let s = select_c(&data, &cfg, &C_GRID, None).unwrap();
    assert!(C_GRID.contains(&s.best_c));
    assert_eq!(s.scores.len(), C_GRID.len());
    let best = s
        .scores
        .iter()
        .filter_map(|(_, _, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let chosen = s
        .scores
        .iter()
        .find(|(c, _, _)| *c == s.best_c)
        .unwrap()
        .2
        .unwrap();
    assert_eq!(best, chosen);
    assert!(select_c(&data, &cfg, &[], None).is_err());
}

#[test]
fn expired_deadline_aborts_the_fit() {
    let data = gaussian(400, 1.0, 29);
    let d = Deadline::after(Duration::ZERO);
    std::thread::sleep(Duration::from_millis(2));
    let e = fit_with_deadline(&data, &jumps(1.5), Some(&d)).unwrap_err();
    assert!(matches!(e, Error::Timeout { .. }));
}
