use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::cholesky;
use crate::error::{Error, Result};

/// Relative pivot tolerance for normal-equation solves.
pub const OLS_PIVOT_TOL: f64 = 1e-12;
/// Slope penalty for designs containing linearly imputed columns.
pub const IMPUTED_RIDGE: f64 = 1e-6;

/// Affine least-squares fit `ŷ = intercept + ⟨coefficients, x⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
    /// In-sample R².
    pub r_squared: f64,
    pub rows: usize,
}

impl LinearFit {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.intercept
                    + self
                        .coefficients
                        .iter()
                        .enumerate()
                        .map(|(j, b)| b * x[(i, j)])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Intercept-only fit (the mean).
    pub fn constant(y: &[f64]) -> LinearFit {
        let mu = crate::data::mean(y);
        let rss: f64 = y.iter().map(|v| (v - mu).powi(2)).sum();
        LinearFit {
            intercept: mu,
            coefficients: Vec::new(),
            residual_variance: if y.len() > 1 { rss / (y.len() - 1) as f64 } else { 0.0 },
            r_squared: 0.0,
            rows: y.len(),
        }
    }
}

/// Least squares with an unpenalised intercept and an optional ridge penalty
/// on the slopes. Solved on centred data through the normal equations.
pub fn fit_ols(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<LinearFit> {
    let (n, q) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::InvalidInput("response length differs from design rows".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be non-negative, got {ridge}")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty design".into()));
    }
    if q == 0 {
        return Ok(LinearFit::constant(y));
    }
    if ridge == 0.0 && n < q + 1 {
        return Err(Error::SingularDesign);
    }
    let x_mean: Vec<f64> = (0..q).map(|j| x.column(j).sum() / n as f64).collect();
    let y_mean = crate::data::mean(y);
    let xc = DMatrix::from_fn(n, q, |i, j| x[(i, j)] - x_mean[j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - y_mean);
    let mut gram = xc.tr_mul(&xc);
    for j in 0..q {
        gram[(j, j)] += ridge;
    }
    let rhs = xc.tr_mul(&yc);
    let ch = cholesky(&gram, OLS_PIVOT_TOL).map_err(|_| Error::SingularDesign)?;
    let beta = ch.solve(&rhs);
    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    let resid = &yc - &xc * &beta;
    let rss = resid.norm_squared();
    let tss = yc.norm_squared();
    let dof = n.saturating_sub(q + 1).max(1);
    Ok(LinearFit {
        intercept,
        coefficients: beta.iter().copied().collect(),
        residual_variance: rss / dof as f64,
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { 1.0 },
        rows: n,
    })
}
