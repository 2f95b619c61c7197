//! Error metrics for drift estimates.

use crate::error::{Error, Result};
use crate::fields::MatrixField;
use crate::points::PointSet;

/// `(1/n) Σ_i f(x_i)·D⁻¹(x_i) f(x_i)`, the empirical relative entropy rate
/// between two diffusions whose drifts differ by `f`.
pub fn relative_entropy_rate(
    f_diff: impl Fn(&[f64]) -> Vec<f64>,
    data: &PointSet,
    diffusion: &MatrixField,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::DegenerateData("no data".into()));
    }
    let mut sum = 0.0;
    for x in data.rows() {
        let d = diffusion.eval(x);
        let f = nalgebra::DVector::from_vec(f_diff(x));
        if d.nrows() != f.len() || d.ncols() != f.len() {
            return Err(Error::domain("diffusion", "shape does not match the drift"));
        }
        let chol = d.cholesky().ok_or_else(|| {
            Error::domain("diffusion", format!("D is not positive definite at {x:?}"))
        })?;
        sum += f.dot(&chol.solve(&f));
    }
    Ok(sum / data.len() as f64)
}

/// Root mean square of `‖a_k - b_k‖` over paired vectors.
pub fn rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum();
    (sq / a.len() as f64).sqrt()
}

/// `√(mean_g ‖f_true(g) - f_est(g)‖²)`; NaN on an empty grid.
pub fn rmse_on_grid(
    f_true: impl Fn(&[f64]) -> Vec<f64>,
    f_est: impl Fn(&[f64]) -> Vec<f64>,
    grid: &PointSet,
) -> f64 {
    let a: Vec<Vec<f64>> = grid.rows().map(&f_true).collect();
    let b: Vec<Vec<f64>> = grid.rows().map(&f_est).collect();
    rmse(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn grid_rmse_arithmetic() {
        let grid = PointSet::from_scalars(&[-1.0, 0.0, 1.0]);
        assert_eq!(rmse_on_grid(|x| x.to_vec(), |x| x.to_vec(), &grid), 0.0);
        assert_eq!(rmse_on_grid(|_| vec![0.0], |_| vec![1.0], &grid), 1.0);
        let r = rmse_on_grid(|x| x.to_vec(), |_| vec![0.0], &grid);
        assert!((r - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(
            rmse_on_grid(|x| x.to_vec(), |x| x.to_vec(), &PointSet::from_scalars(&[])).is_nan()
        );
    }

    #[test]
    fn entropy_rate_moments() {
        let data = PointSet::from_scalars(&[0.3, -2.0, 5.0]);
        let unit = MatrixField::Scalar(1.0);
        assert_eq!(
            relative_entropy_rate(|_| vec![0.0], &data, &unit).unwrap(),
            0.0
        );
        let c = relative_entropy_rate(|_| vec![1.5], &data, &unit).unwrap();
        assert!((c - 2.25).abs() < 1e-15);
        let half = relative_entropy_rate(|_| vec![1.0], &data, &MatrixField::Scalar(0.5)).unwrap();
        assert!((half - 2.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let g = relative_entropy_rate(|x| x.to_vec(), &PointSet::from_scalars(&xs), &unit).unwrap();
        assert!((g - 1.0).abs() < 0.05, "{g}");
    }

    #[test]
    fn singular_diffusion_is_a_domain_error() {
        let data = PointSet::from_scalars(&[1.0]);
        let err =
            relative_entropy_rate(|_| vec![1.0], &data, &MatrixField::Scalar(0.0)).unwrap_err();
        assert!(matches!(
            err,
            Error::Domain {
                param: "diffusion",
                ..
            }
        ));
    }
}
