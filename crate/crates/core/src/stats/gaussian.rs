use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linalg::cholesky;
use crate::data::{CovariatePattern, MomentSummary, Stratum};
use crate::error::{Error, Result};

/// Relative pivot tolerance for covariance solves.
pub const COV_PIVOT_TOL: f64 = 1e-10;

/// Best linear predictor of `X_mis` from `X_obs` under a Gaussian model:
/// `base + slope (x_obs − mean_obs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussian {
    pub mis_idx: Vec<usize>,
    pub obs_idx: Vec<usize>,
    /// E[X_mis] in the chosen stratum.
    pub base: Vec<f64>,
    /// E[X_obs] in the chosen stratum.
    pub mean_obs: Vec<f64>,
    /// Row-major |mis| × |obs|: Σ_mis,obs Σ_obs,obs⁻¹.
    pub slope: Vec<Vec<f64>>,
    /// 2-norm condition number of Σ_obs,obs.
    pub condition_number: f64,
}

impl ConditionalGaussian {
    pub fn predict(&self, x_obs: &[f64]) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.slope)
            .map(|(b, row)| {
                b + row
                    .iter()
                    .zip(x_obs.iter().zip(&self.mean_obs))
                    .map(|(s, (x, m))| s * (x - m))
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Inverts a covariance block, mapping failures to `SingularCovariance`.
pub(crate) fn cov_solve(block: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = cholesky(block, COV_PIVOT_TOL).map_err(|pivot| Error::SingularCovariance { pivot })?;
    Ok(ch.solve_matrix(rhs))
}

pub(crate) fn condition_number(block: &DMatrix<f64>) -> f64 {
    if block.nrows() == 0 {
        return 1.0;
    }
    let eig = block.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Conditional-mean coefficients for every missing covariate of `pattern`,
/// using the means of `stratum` (`Observational` = target population).
pub fn conditional_gaussian(
    moments: &MomentSummary,
    pattern: &CovariatePattern,
    stratum: Stratum,
) -> Result<ConditionalGaussian> {
    let means = match stratum {
        Stratum::Trial => &moments.mean_trial,
        Stratum::Observational => &moments.mean_target,
    };
    let name = |j: usize| moments.name(j);
    let obs = &pattern.obs_idx;
    let mis = &pattern.mis_idx;
    let s_oo = moments
        .cov_block(obs, obs)
        .ok_or_else(|| Error::MissingBlock(name(obs.iter().copied().next().unwrap_or(0))))?;
    let s_mo = moments
        .cov_block(mis, obs)
        .ok_or_else(|| Error::MissingBlock(name(mis.iter().copied().next().unwrap_or(0))))?;
    for &j in mis.iter().chain(obs) {
        if means[j].is_nan() {
            return Err(Error::MissingBlock(name(j)));
        }
    }
    // slope = Σ_mo Σ_oo⁻¹ = (Σ_oo⁻¹ Σ_om)ᵀ
    let slope_t = cov_solve(&s_oo, &s_mo.transpose())?;
    let slope: Vec<Vec<f64>> = (0..mis.len())
        .map(|r| (0..obs.len()).map(|c| slope_t[(c, r)]).collect())
        .collect();
    Ok(ConditionalGaussian {
        mis_idx: mis.clone(),
        obs_idx: obs.clone(),
        base: mis.iter().map(|&j| means[j]).collect(),
        mean_obs: obs.iter().map(|&j| means[j]).collect(),
        slope,
        condition_number: condition_number(&s_oo),
    })
}
