//! Dense LU with partial pivoting plus a 1-norm condition estimate.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

pub(crate) struct DenseLu {
    lu: LU<f64, Dyn, Dyn>,
    norm1: f64,
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl DenseLu {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let norm1 = norm1(&m);
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::Conditioning {
                estimate: f64::INFINITY,
            });
        }
        Ok(Self { lu, norm1 })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(b).expect("factorisation checked invertible")
    }

    /// Solves `Mᵀ x = b` with `P M = L U`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let u = self.lu.u();
        let l = self.lu.l();
        let y = u.tr_solve_upper_triangular(b).expect("nonzero pivots");
        let mut x = l.tr_solve_lower_triangular(&y).expect("unit diagonal");
        self.lu.p().inv_permute_rows(&mut x);
        x
    }

    /// Hager–Higham estimate of `‖M‖₁ ‖M⁻¹‖₁`.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.lu.l().nrows();
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve(&x);
            let new_est = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z.iter().enumerate().fold((0, 0.0f64), |(bj, bm), (j, v)| {
                if v.abs() > bm {
                    (j, v.abs())
                } else {
                    (bj, bm)
                }
            });
            if new_est <= est || zmax <= z.dot(&x) {
                est = est.max(new_est);
                break;
            }
            est = new_est;
            x.fill(0.0);
            x[j] = 1.0;
        }
        est * self.norm1
    }
}
