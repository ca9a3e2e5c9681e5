//! Robinson residual-on-residual estimate of linear CATE coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CombinedSample, Stratum};
use crate::error::{Error, Result};
use crate::stats::linalg::cholesky;
use crate::stats::ols::{IMPUTED_RIDGE, OLS_PIVOT_TOL};
use crate::stats::{fit_ols, silverman_bandwidths, KernelFit, Stage1};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobinsonFit {
    pub covariates: Vec<String>,
    /// Column indices into the sample the fit was run on.
    pub cols: Vec<usize>,
    pub delta: Vec<f64>,
    /// Heteroskedasticity-robust (HC0) standard errors.
    pub standard_errors: Vec<f64>,
    pub stage1: Stage1,
    pub bandwidths: Option<Vec<f64>>,
    /// R² of the stage-1 fit of E[Y | X].
    pub stage1_r2: f64,
}

impl RobinsonFit {
    pub fn coefficient(&self, col: usize) -> Option<(f64, f64)> {
        self.cols
            .iter()
            .position(|&c| c == col)
            .map(|k| (self.delta[k], self.standard_errors[k]))
    }
}

/// Fits `τ(x) = ⟨δ, x⟩` on the trial rows over `cols`:
/// stage 1 estimates m(x) = E[Y | X = x], then δ is the no-intercept OLS of
/// `Y − m̂(X)` on `(A − e1) X`.
pub fn robinson_rlearner(sample: &CombinedSample, cols: &[usize], e1: f64, stage1: Stage1) -> Result<RobinsonFit> {
    if !(e1 > 0.0 && e1 < 1.0) {
        return Err(Error::InvalidInput(format!("e1 must lie in (0, 1), got {e1}")));
    }
    if cols.is_empty() {
        return Err(Error::InvalidInput("Robinson fit needs at least one covariate".into()));
    }
    for &j in cols {
        if !sample.observed_in(j, Stratum::Trial) {
            return Err(Error::MissingBlock(sample.names()[j].clone()));
        }
    }
    sample.arms()?;
    let rows = sample.trial_rows();
    let x = sample.design(rows, cols);
    let y = sample.outcomes(rows);
    let n = rows.len();
    let q = cols.len();
    if n <= q {
        return Err(Error::SingularDesign);
    }

    let (m_hat, bandwidths) = match stage1 {
        Stage1::Linear => {
            let ridge = if sample.is_imputed() { IMPUTED_RIDGE } else { 0.0 };
            (fit_ols(&x, &y, ridge)?.predict(&x), None)
        }
        Stage1::Kernel => {
            let h = silverman_bandwidths(&x);
            let fit = KernelFit::new(x.clone(), y.clone(), h.clone());
            (fit.fitted_loo(), Some(h))
        }
    };
    let y_mean = crate::data::mean(&y);
    let tss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let y_tilde = DVector::from_fn(n, |i, _| y[i] - m_hat[i]);
    let rss: f64 = y_tilde.norm_squared();

    let z = DMatrix::from_fn(n, q, |i, j| {
        let a = if sample.treatment(rows[i]) == Some(true) { 1.0 } else { 0.0 };
        (a - e1) * x[(i, j)]
    });
    let gram = z.tr_mul(&z);
    let ch = cholesky(&gram, OLS_PIVOT_TOL).map_err(|_| Error::SingularDesign)?;
    let delta = ch.solve(&z.tr_mul(&y_tilde));
    let resid = &y_tilde - &z * &delta;
    let mut meat = DMatrix::zeros(q, q);
    for i in 0..n {
        let zi = z.row(i);
        meat += zi.transpose() * zi * resid[i].powi(2);
    }
    let bread = ch.inverse();
    let cov = &bread * meat * &bread;

    Ok(RobinsonFit {
        covariates: cols.iter().map(|&j| sample.names()[j].clone()).collect(),
        cols: cols.to_vec(),
        delta: delta.iter().copied().collect(),
        standard_errors: (0..q).map(|k| cov[(k, k)].max(0.0).sqrt()).collect(),
        stage1,
        bandwidths,
        stage1_r2: if tss > 0.0 { 1.0 - rss / tss } else { 1.0 },
    })
}
