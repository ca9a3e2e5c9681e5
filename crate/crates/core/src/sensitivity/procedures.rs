use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bias::theoretical_bias;
use super::grid::{Marker, SensitivityGrid};
use super::robinson::{robinson_rlearner, RobinsonFit};
use crate::data::{
    detect_pattern, estimate_moments, CombinedSample, CovSource, CovariatePattern, MissingLocation, MomentSummary,
    Stratum,
};
use crate::error::{Error, Result};
use crate::estimators::{difference_in_means, g_formula, quantile_sorted, AteEstimate, EstimatorConfig, EstimatorKind};
use crate::stats::{box_m_between_strata, fit_ols, Stage1};
use crate::stream_rng;

fn require_location(sample: &CombinedSample, j: usize, wanted: MissingLocation) -> Result<CovariatePattern> {
    if j >= sample.p() {
        return Err(Error::InvalidInput(format!("covariate index {j} out of range")));
    }
    let pattern = detect_pattern(sample);
    let found = pattern.location_of(j);
    if found != Some(wanted) {
        let found = found.map(|l| format!("{l:?}")).unwrap_or_else(|| "observed in both strata".into());
        return Err(Error::PatternMismatch(format!(
            "covariate '{}' is {found}, expected {wanted:?}",
            sample.names()[j]
        )));
    }
    Ok(pattern)
}

/// Sensitivity map for a covariate absent from both strata and assumed
/// independent of the observed ones: bias = −δ Δ.
pub fn procedure_totally_missing(covariate: &str, delta_axis: Vec<f64>, shift_axis: Vec<f64>, threshold: f64) -> SensitivityGrid {
    let mut grid = SensitivityGrid::bilinear(covariate, delta_axis, shift_axis, 0.0, threshold);
    grid.metadata.insert(
        "assumption".into(),
        "missing covariate independent of the observed covariates".into(),
    );
    grid.metadata.insert("pattern".into(), "totally_missing".into());
    grid
}

/// Default decision threshold |τ̂_obs − τ̂_DM|, with τ̂_obs the G-formula on the observed covariates.
pub fn default_threshold(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<f64> {
    let obs = g_formula(sample, cfg)?.value;
    let dm = difference_in_means(sample)?.value;
    Ok((obs - dm).abs())
}

/// Sensitivity map for a covariate observed only in the observational stratum.
///
/// The covariance blocks and observed shifts are estimated on the
/// observational rows and folded into the constant correction term.
pub fn procedure_missing_in_rct(
    sample: &CombinedSample,
    mis: usize,
    delta_axis: Vec<f64>,
    shift_axis: Vec<f64>,
    threshold: Option<f64>,
    cfg: &EstimatorConfig,
) -> Result<SensitivityGrid> {
    let pattern = require_location(sample, mis, MissingLocation::MissingInTrial)?;
    let mut cols = pattern.obs_idx.clone();
    cols.push(mis);
    let sub = sample.select_covariates(&cols)?;
    let k = cols.len() - 1;
    let sub_pattern = CovariatePattern::with_missing(cols.len(), &[(k, MissingLocation::MissingInTrial)]);
    let moments = estimate_moments(&sub, &sub_pattern, CovSource::ObservationalOnly)?;
    let report = theoretical_bias(&[1.0], &moments, &sub_pattern, Some(&[0.0]))?;
    let name = sample.names()[mis].clone();
    let correction = report.estimated_terms[&name];

    let mut obs_cfg = cfg.clone();
    obs_cfg.covariates = Some(pattern.obs_idx.clone());
    let (threshold, source) = match threshold {
        Some(t) => (t, "supplied"),
        None => (default_threshold(sample, &obs_cfg)?, "abs(tau_obs - tau_dm)"),
    };
    let mut grid = SensitivityGrid::bilinear(&name, delta_axis, shift_axis, correction, threshold);
    grid.metadata.insert("pattern".into(), "missing_in_trial".into());
    grid.metadata.insert("estimated_correction".into(), correction.into());
    grid.metadata.insert("threshold_source".into(), source.into());
    grid.metadata.insert("cov_source".into(), "observational".into());
    grid.metadata.insert(
        "assumption".into(),
        "covariance matrix transportable between strata".into(),
    );
    match box_m_between_strata(sample, &pattern.obs_idx) {
        Ok(r) => {
            grid.metadata.insert("box_m_p_value".into(), r.p_value.into());
            grid.metadata.insert("box_m_statistic".into(), r.statistic.into());
            grid.metadata.insert("box_m_approximation".into(), r.approximation.into());
        }
        Err(e) => {
            grid.metadata.insert("box_m_error".into(), e.to_string().into());
        }
    }
    Ok(grid)
}

/// τ = ⟨δ_obs, E[X_obs]⟩ + ⟨δ_mis, E[X_mis]⟩ with the last coefficient of `fit` paired with `mis_mean`.
pub fn linear_cate_ate(fit: &RobinsonFit, obs_means: &[f64], mis_mean: f64) -> f64 {
    let q = fit.delta.len();
    fit.delta[..q - 1].iter().zip(obs_means).map(|(d, m)| d * m).sum::<f64>() + fit.delta[q - 1] * mis_mean
}

/// Target ATE for each hypothesised E[X_mis], for a covariate observed only in the trial.
pub fn procedure_missing_in_obs(
    sample: &CombinedSample,
    mis: usize,
    expectations: &[f64],
    e1: f64,
    stage1: Stage1,
) -> Result<Vec<AteEstimate>> {
    let pattern = require_location(sample, mis, MissingLocation::MissingInObservational)?;
    let mut cols = pattern.obs_idx.clone();
    cols.push(mis);
    let fit = robinson_rlearner(sample, &cols, e1, stage1)?;
    let obs_means: Vec<f64> = pattern
        .obs_idx
        .iter()
        .map(|&j| crate::data::mean(&sample.column_values(sample.obs_rows(), j)))
        .collect();
    let (d_mis, se_mis) = (fit.delta[cols.len() - 1], fit.standard_errors[cols.len() - 1]);
    Ok(expectations
        .iter()
        .map(|&e| {
            let mut est = AteEstimate {
                estimator: EstimatorKind::GFormula,
                value: linear_cate_ate(&fit, &obs_means, e),
                ci: None,
                n: sample.n(),
                m: sample.m(),
                covariates_used: fit.covariates.clone(),
                diagnostics: Default::default(),
                seed: None,
                notes: Vec::new(),
            };
            est.diagnostics.insert("hypothesized_mean".into(), e);
            est.diagnostics.insert("delta_mis".into(), d_mis);
            est.diagnostics.insert("delta_mis_se".into(), se_mis);
            est
        })
        .collect())
}

/// Fills every partially missing covariate of `pattern` with its OLS
/// prediction from the observed covariates, fitted on the stratum that observes it.
pub fn linear_impute(sample: &CombinedSample, pattern: &CovariatePattern) -> Result<CombinedSample> {
    let detected = detect_pattern(sample);
    let mut out = sample.clone();
    let mut any = false;
    for (&j, &loc) in pattern.mis_idx.iter().zip(&pattern.mis_location) {
        let (source, target) = match loc {
            MissingLocation::TotallyMissing => continue,
            MissingLocation::MissingInTrial => (Stratum::Observational, Stratum::Trial),
            MissingLocation::MissingInObservational => (Stratum::Trial, Stratum::Observational),
        };
        if detected.location_of(j) != Some(loc) {
            return Err(Error::PatternMismatch(format!(
                "covariate '{}' is not {loc:?} in the data",
                sample.names()[j]
            )));
        }
        let predictors: Vec<usize> = detected.obs_idx.clone();
        let src_rows = sample.stratum_rows(source);
        let fit = fit_ols(
            &sample.design(src_rows, &predictors),
            &sample.column_values(src_rows, j),
            0.0,
        )?;
        let tgt_rows = sample.stratum_rows(target);
        let pred = fit.predict(&sample.design(tgt_rows, &predictors));
        let mut values: Vec<f64> = (0..sample.rows()).map(|i| out.covariate_matrix()[(i, j)]).collect();
        for (&i, v) in tgt_rows.iter().zip(pred) {
            values[i] = v;
        }
        out = out.with_covariate_values(j, &values)?;
        out.mark_imputed(j);
        any = true;
    }
    if !any {
        return Err(Error::PatternMismatch("no partially missing covariate to impute".into()));
    }
    Ok(out)
}

fn check_sigmas(sigma_mis: f64, sigma_prox: f64) -> Result<()> {
    if !(sigma_mis > 0.0) {
        return Err(Error::NonPositiveVariance(sigma_mis));
    }
    if !(sigma_prox >= 0.0) {
        return Err(Error::NonPositiveVariance(sigma_prox));
    }
    Ok(())
}

/// Bias when adjusting for X_prox = X_mis + η, η ~ (0, σ²_prox), instead of X_mis.
pub fn proxy_bias(delta_mis: f64, shift: f64, sigma_mis: f64, sigma_prox: f64) -> Result<f64> {
    check_sigmas(sigma_mis, sigma_prox)?;
    let (vm, vp) = (sigma_mis * sigma_mis, sigma_prox * sigma_prox);
    Ok(-delta_mis * shift * (1.0 - vm / (vm + vp)))
}

/// Plug-in version using the (attenuated) coefficient of the proxy.
pub fn proxy_bias_estimated(delta_prox_hat: f64, shift_prox: f64, sigma_mis: f64, sigma_prox: f64) -> Result<f64> {
    check_sigmas(sigma_mis, sigma_prox)?;
    Ok(-delta_prox_hat * shift_prox * (sigma_prox * sigma_prox) / (sigma_mis * sigma_mis))
}

/// Standard deviation of covariate `j` in a stratum observing it (observational first).
pub fn estimate_sigma(sample: &CombinedSample, j: usize) -> Result<f64> {
    for stratum in [Stratum::Observational, Stratum::Trial] {
        if sample.observed_in(j, stratum) {
            return Ok(crate::data::variance(&sample.column_values(sample.stratum_rows(stratum), j)).sqrt());
        }
    }
    Err(Error::MissingBlock(sample.names()[j].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub proxy: String,
    pub delta_prox_hat: f64,
    pub delta_prox_se: f64,
    pub shift_prox: f64,
    pub sigma_mis: f64,
    pub sigma_prox: f64,
    pub bias: f64,
    /// Bootstrap interval of δ̂_prox and the induced bias interval.
    pub delta_prox_ci: Option<(f64, f64)>,
    pub bias_ci: Option<(f64, f64)>,
}

/// Proxy procedure: Robinson fit with the proxy among the covariates, then the plug-in bias.
#[allow(clippy::too_many_arguments)]
pub fn procedure_proxy(
    sample: &CombinedSample,
    proxy: usize,
    sigma_mis: f64,
    sigma_prox: f64,
    e1: f64,
    stage1: Stage1,
    bootstrap: Option<(usize, u64)>,
) -> Result<ProxyReport> {
    let pattern = detect_pattern(sample);
    if !pattern.obs_idx.contains(&proxy) {
        return Err(Error::PatternMismatch(format!(
            "proxy '{}' must be observed in both strata",
            sample.names()[proxy]
        )));
    }
    let cols = pattern.obs_idx.clone();
    let k = cols.iter().position(|&c| c == proxy).unwrap();
    let fit = robinson_rlearner(sample, &cols, e1, stage1)?;
    let mean_of = |s: Stratum| crate::data::mean(&sample.column_values(sample.stratum_rows(s), proxy));
    let shift_prox = mean_of(Stratum::Observational) - mean_of(Stratum::Trial);
    let bias = proxy_bias_estimated(fit.delta[k], shift_prox, sigma_mis, sigma_prox)?;
    let (delta_prox_ci, bias_ci) = match bootstrap {
        None => (None, None),
        Some((reps, seed)) => {
            let trial = sample.trial_rows();
            let obs = sample.obs_rows();
            let mut draws: Vec<f64> = (0..reps)
                .into_par_iter()
                .filter_map(|r| {
                    let mut rng = stream_rng(seed, r as u64);
                    let mut rows: Vec<usize> = (0..trial.len()).map(|_| trial[rng.random_range(0..trial.len())]).collect();
                    rows.extend(obs.iter().copied());
                    let s = sample.subset_rows(&rows).ok()?;
                    robinson_rlearner(&s, &cols, e1, stage1).ok().map(|f| f.delta[k])
                })
                .collect();
            if draws.len() * 20 < reps * 19 {
                return Err(Error::BootstrapFailure {
                    skipped: reps - draws.len(),
                    reps,
                });
            }
            draws.sort_by(f64::total_cmp);
            let lo = quantile_sorted(&draws, 0.025);
            let hi = quantile_sorted(&draws, 0.975);
            let b_lo = proxy_bias_estimated(lo, shift_prox, sigma_mis, sigma_prox)?;
            let b_hi = proxy_bias_estimated(hi, shift_prox, sigma_mis, sigma_prox)?;
            (Some((lo, hi)), Some((b_lo.min(b_hi), b_lo.max(b_hi))))
        }
    };
    Ok(ProxyReport {
        proxy: sample.names()[proxy].clone(),
        delta_prox_hat: fit.delta[k],
        delta_prox_se: fit.standard_errors[k],
        shift_prox,
        sigma_mis,
        sigma_prox,
        bias,
        delta_prox_ci,
        bias_ci,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub delta: f64,
    pub standard_error: f64,
}

/// CATE coefficient of a covariate missing in the trial: impute it on the
/// trial from the observational regression, then run the Robinson fit.
pub fn data_driven_delta(sample: &CombinedSample, mis: usize, e1: f64, stage1: Stage1) -> Result<DeltaEstimate> {
    let pattern = require_location(sample, mis, MissingLocation::MissingInTrial)?;
    let single = CovariatePattern::with_missing(sample.p(), &[(mis, MissingLocation::MissingInTrial)]);
    let imputed = linear_impute(sample, &single)?;
    let mut cols = pattern.obs_idx.clone();
    cols.push(mis);
    let fit = robinson_rlearner(&imputed, &cols, e1, stage1)?;
    let k = cols.len() - 1;
    Ok(DeltaEstimate {
        delta: fit.delta[k],
        standard_error: fit.standard_errors[k],
    })
}

/// Share of CATE variance attributable to the missing covariate:
/// δ² V[X_mis] / V[⟨δ̂_obs, X_obs⟩]. `moments` must index the same columns as `obs_fit`.
pub fn partial_r2(delta_mis: f64, var_mis: f64, obs_fit: &RobinsonFit, moments: &MomentSummary) -> Result<f64> {
    let cov = moments
        .cov_block(&obs_fit.cols, &obs_fit.cols)
        .ok_or_else(|| Error::MissingBlock(obs_fit.covariates.first().cloned().unwrap_or_default()))?;
    let d = nalgebra::DVector::from_column_slice(&obs_fit.delta);
    let denom = (d.transpose() * cov * &d)[(0, 0)];
    if !(denom > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    Ok(delta_mis * delta_mis * var_mis / denom)
}

/// Attaches an estimated (δ, Δ) marker to a grid.
pub fn with_marker(mut grid: SensitivityGrid, marker: Marker) -> SensitivityGrid {
    grid.marker = Some(marker);
    grid
}
