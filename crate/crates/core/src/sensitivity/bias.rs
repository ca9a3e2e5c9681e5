use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CovariatePattern, MissingLocation, MomentSummary};
use crate::error::{Error, Result};
use crate::stats::gaussian::cov_solve;

pub const SIGN_CONVENTION: &str = "bias = E[tau_hat_obs] - tau";

/// How a bias input was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterSource {
    Supplied,
    Estimated,
}

/// Asymptotic bias of an estimator restricted to the observed covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub bias: f64,
    /// −δ_j (Δ_j − c_j) per missing covariate.
    pub per_covariate_terms: BTreeMap<String, f64>,
    /// c_j = Σ_j,obs Σ_obs,obs⁻¹ (E[X_obs] − E[X_obs | S = 1]).
    pub estimated_terms: BTreeMap<String, f64>,
    /// Δ_j used for each missing covariate.
    pub shifts: BTreeMap<String, f64>,
    pub delta: BTreeMap<String, f64>,
    pub shift_source: BTreeMap<String, ParameterSource>,
    /// Totally missing covariates whose independence from X_obs was assumed.
    pub independence_assumed: Vec<String>,
    pub sign_convention: String,
}

impl BiasReport {
    /// Recomputes the bias from its parts.
    pub fn recompose(&self) -> f64 {
        self.delta
            .iter()
            .map(|(k, d)| -d * (self.shifts[k] - self.estimated_terms[k]))
            .sum()
    }
}

/// Closed-form asymptotic bias of a consistent estimator that adjusts for
/// `pattern.obs_idx` only, under a linear CATE and a transportable covariance.
///
/// `delta_mis` and `shift_override` are parallel to `pattern.mis_idx`; a
/// non-`NaN` override replaces the shift estimated from `moments`.
/// A totally missing covariate with no covariance entries is taken to be
/// independent of the observed ones.
pub fn theoretical_bias(
    delta_mis: &[f64],
    moments: &MomentSummary,
    pattern: &CovariatePattern,
    shift_override: Option<&[f64]>,
) -> Result<BiasReport> {
    let mis = &pattern.mis_idx;
    let obs = &pattern.obs_idx;
    if delta_mis.len() != mis.len() {
        return Err(Error::InvalidInput(format!(
            "{} CATE coefficients for {} missing covariates",
            delta_mis.len(),
            mis.len()
        )));
    }
    if let Some(o) = shift_override {
        if o.len() != mis.len() {
            return Err(Error::InvalidInput("shift override length differs from missing set".into()));
        }
    }
    let delta_obs: Vec<f64> = obs.iter().map(|&j| moments.shift(j)).collect();
    if let Some(k) = delta_obs.iter().position(|v| !v.is_finite()) {
        return Err(Error::MissingShift(moments.name(obs[k])));
    }
    let s_oo = moments
        .cov_block(obs, obs)
        .ok_or_else(|| Error::MissingBlock(moments.name(obs.first().copied().unwrap_or(0))))?;
    // Σ_oo⁻¹ Δ_obs
    let weights = if obs.is_empty() {
        DMatrix::zeros(0, 1)
    } else {
        cov_solve(&s_oo, &DMatrix::from_column_slice(obs.len(), 1, &delta_obs))?
    };

    let mut report = BiasReport {
        bias: 0.0,
        per_covariate_terms: BTreeMap::new(),
        estimated_terms: BTreeMap::new(),
        shifts: BTreeMap::new(),
        delta: BTreeMap::new(),
        shift_source: BTreeMap::new(),
        independence_assumed: Vec::new(),
        sign_convention: SIGN_CONVENTION.into(),
    };
    for (k, &j) in mis.iter().enumerate() {
        let name = moments.name(j);
        let cross = moments.cov_block(&[j], obs);
        let c = match cross {
            Some(row) => (0..obs.len()).map(|o| row[(0, o)] * weights[(o, 0)]).sum::<f64>(),
            None if pattern.location_of(j) == Some(MissingLocation::TotallyMissing) => {
                report.independence_assumed.push(name.clone());
                0.0
            }
            None => return Err(Error::MissingBlock(name)),
        };
        let supplied = shift_override.map(|o| o[k]).filter(|v| !v.is_nan());
        let (shift, source) = match supplied {
            Some(v) => (v, ParameterSource::Supplied),
            None => {
                let v = moments.shift(j);
                if !v.is_finite() {
                    return Err(Error::MissingShift(name));
                }
                (v, ParameterSource::Estimated)
            }
        };
        let term = -delta_mis[k] * (shift - c);
        report.bias += term;
        report.per_covariate_terms.insert(name.clone(), term);
        report.estimated_terms.insert(name.clone(), c);
        report.shifts.insert(name.clone(), shift);
        report.delta.insert(name.clone(), delta_mis[k]);
        report.shift_source.insert(name, source);
    }
    Ok(report)
}
