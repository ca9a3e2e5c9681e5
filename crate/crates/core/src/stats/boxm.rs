use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::gaussian::COV_PIVOT_TOL;
use super::linalg::cholesky;
use crate::data::CombinedSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxMResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Always "chi-square".
    pub approximation: String,
}

fn ln_det(a: &DMatrix<f64>) -> Result<f64> {
    cholesky(a, COV_PIVOT_TOL)
        .map(|c| c.ln_det())
        .map_err(|pivot| Error::SingularCovariance { pivot })
}

/// Box's M test of equal covariance matrices for two groups, chi-square approximation.
pub fn box_m_test(cov_a: &DMatrix<f64>, n_a: usize, cov_b: &DMatrix<f64>, n_b: usize) -> Result<BoxMResult> {
    let p = cov_a.nrows();
    if cov_a.shape() != (p, p) || cov_b.shape() != (p, p) || p == 0 {
        return Err(Error::InvalidInput("covariance matrices must be square and of equal size".into()));
    }
    if n_a <= p || n_b <= p {
        return Err(Error::InvalidInput(format!(
            "Box's M needs more than {p} rows per group, got {n_a} and {n_b}"
        )));
    }
    let (fa, fb) = ((n_a - 1) as f64, (n_b - 1) as f64);
    let total = fa + fb;
    let pooled = (cov_a * fa + cov_b * fb) / total;
    let m = total * ln_det(&pooled)? - fa * ln_det(cov_a)? - fb * ln_det(cov_b)?;
    let pf = p as f64;
    let c = (1.0 / fa + 1.0 / fb - 1.0 / total) * (2.0 * pf * pf + 3.0 * pf - 1.0) / (6.0 * (pf + 1.0));
    let dof = p * (p + 1) / 2;
    let statistic = ((1.0 - c) * m).max(0.0);
    let p_value = if statistic == 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
        chi.sf(statistic).clamp(0.0, 1.0)
    };
    Ok(BoxMResult {
        statistic,
        dof,
        p_value,
        approximation: "chi-square".into(),
    })
}

/// Unbiased covariance of `cols` over `rows`.
pub fn sample_covariance(sample: &CombinedSample, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let x = sample.design(rows, cols);
    covariance_of(&x)
}

pub fn covariance_of(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let means = x.row_mean();
    let centred = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - means[j]);
    centred.tr_mul(&centred) / (n as f64 - 1.0)
}

/// Box's M between the trial and observational strata on `cols`.
pub fn box_m_between_strata(sample: &CombinedSample, cols: &[usize]) -> Result<BoxMResult> {
    for &j in cols {
        for stratum in [crate::data::Stratum::Trial, crate::data::Stratum::Observational] {
            if !sample.observed_in(j, stratum) {
                return Err(Error::MissingBlock(sample.names()[j].clone()));
            }
        }
    }
    let a = sample_covariance(sample, sample.trial_rows(), cols);
    let b = sample_covariance(sample, sample.obs_rows(), cols);
    box_m_test(&a, sample.n(), &b, sample.m())
}
