//! State-dependent vector and matrix fields: drifts, noise matrices and
//! diffusion matrices.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A map ℝ^d → ℝ^d. The named presets act componentwise.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorField {
    #[default]
    Zero,
    /// `x - x³`, the double-well drift.
    DoubleWell,
    /// `slope · x`.
    Linear { slope: f64 },
    /// `Σ_k coeffs[k] · x^k`.
    Polynomial { coeffs: Vec<f64> },
    #[serde(skip)]
    Custom(VectorFn),
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorField::Zero => write!(f, "Zero"),
            VectorField::DoubleWell => write!(f, "DoubleWell"),
            VectorField::Linear { slope } => write!(f, "Linear {{ slope: {slope} }}"),
            VectorField::Polynomial { coeffs } => write!(f, "Polynomial {{ coeffs: {coeffs:?} }}"),
            VectorField::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

impl VectorField {
    pub fn custom(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        VectorField::Custom(Arc::new(f))
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            VectorField::Zero => out.fill(0.0),
            VectorField::DoubleWell => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = v - v * v * v;
                }
            }
            VectorField::Linear { slope } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = slope * v;
                }
            }
            VectorField::Polynomial { coeffs } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = horner(coeffs, v);
                }
            }
            VectorField::Custom(f) => f(x, out),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, VectorField::Zero)
    }

    pub fn describe(&self) -> String {
        match self {
            VectorField::Zero => "0".into(),
            VectorField::DoubleWell => "x - x^3".into(),
            VectorField::Linear { slope } => format!("{slope}*x"),
            VectorField::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| format!("{c}*x^{k}"))
                .collect::<Vec<_>>()
                .join(" + "),
            VectorField::Custom(_) => "custom".into(),
        }
    }
}

/// A matrix-valued map of the state: the noise matrix σ(x) (d × k) or the
/// diffusion matrix D(x) (d × d).
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixField {
    /// `value · I_d`.
    Scalar(f64),
    /// A constant matrix given by rows.
    Constant(Vec<Vec<f64>>),
    #[serde(skip)]
    Custom(MatrixFn),
}

impl Default for MatrixField {
    fn default() -> Self {
        MatrixField::Scalar(1.0)
    }
}

impl fmt::Debug for MatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixField::Scalar(v) => write!(f, "Scalar({v})"),
            MatrixField::Constant(rows) => write!(f, "Constant({rows:?})"),
            MatrixField::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl MatrixField {
    pub fn custom(f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        MatrixField::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        match self {
            MatrixField::Scalar(v) => DMatrix::identity(d, d) * *v,
            MatrixField::Constant(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
            }
            MatrixField::Custom(f) => f(x),
        }
    }

    /// The scalar value when the field is a constant 1 × 1 matrix or a
    /// multiple of the identity.
    pub fn constant_scalar(&self) -> Option<f64> {
        match self {
            MatrixField::Scalar(v) => Some(*v),
            MatrixField::Constant(rows) if rows.len() == 1 && rows[0].len() == 1 => {
                Some(rows[0][0])
            }
            _ => None,
        }
    }

    /// Checks the shape of a constant field against the state dimension.
    pub fn validate(&self, dim: usize, square: bool) -> Result<()> {
        match self {
            MatrixField::Scalar(v) if !v.is_finite() => {
                Err(Error::domain("matrix", "scalar value must be finite"))
            }
            MatrixField::Constant(rows) => {
                if rows.len() != dim {
                    return Err(Error::domain(
                        "matrix",
                        format!("expected {dim} rows, found {}", rows.len()),
                    ));
                }
                let cols = rows[0].len();
                if rows.iter().any(|r| r.len() != cols) || cols == 0 {
                    return Err(Error::domain("matrix", "ragged or empty rows"));
                }
                if square && cols != dim {
                    return Err(Error::domain("matrix", format!("expected {dim} columns")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
