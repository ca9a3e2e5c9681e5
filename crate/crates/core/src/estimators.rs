//! Difference in means, G-formula, IPSW and AIPSW, plus a stratified bootstrap.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{detect_pattern, CombinedSample};
use crate::error::{Error, Result};
use crate::stats::{fit_logistic, fit_ols, LinearFit, OutcomeModel, SelectionModel};
use crate::stats::ols::IMPUTED_RIDGE;
use crate::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Dm,
    GFormula,
    Ipsw,
    Aipsw,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Dm,
        EstimatorKind::GFormula,
        EstimatorKind::Ipsw,
        EstimatorKind::Aipsw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Dm => "dm",
            EstimatorKind::GFormula => "gformula",
            EstimatorKind::Ipsw => "ipsw",
            EstimatorKind::Aipsw => "aipsw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "dm" | "differenceinmeans" => Some(EstimatorKind::Dm),
            "gformula" | "g" => Some(EstimatorKind::GFormula),
            "ipsw" => Some(EstimatorKind::Ipsw),
            "aipsw" => Some(EstimatorKind::Aipsw),
            _ => None,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Known trial treatment probability.
    pub e1: f64,
    pub outcome_model: OutcomeModel,
    pub selection_model: SelectionModel,
    /// Hájek normalisation of the IPSW weights per arm.
    pub normalize: bool,
    /// Cross-fitting folds for AIPSW.
    pub folds: usize,
    /// Seed of the cross-fitting fold assignment.
    pub seed: u64,
    /// Ridge penalty on outcome-model slopes. Imputed samples use at least 1e-6.
    pub ridge: f64,
    /// Covariate indices to adjust for; `None` = every covariate observed in both strata.
    pub covariates: Option<Vec<usize>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            e1: 0.5,
            outcome_model: OutcomeModel::Linear,
            selection_model: SelectionModel::Logistic,
            normalize: false,
            folds: 5,
            seed: 0,
            ridge: 0.0,
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub estimator: EstimatorKind,
    pub value: f64,
    /// 95% stratified-bootstrap percentile interval.
    pub ci: Option<(f64, f64)>,
    pub n: usize,
    pub m: usize,
    pub covariates_used: Vec<String>,
    pub diagnostics: BTreeMap<String, f64>,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl AteEstimate {
    fn new(estimator: EstimatorKind, value: f64, sample: &CombinedSample, cols: &[usize]) -> Self {
        AteEstimate {
            estimator,
            value,
            ci: None,
            n: sample.n(),
            m: sample.m(),
            covariates_used: cols.iter().map(|&j| sample.names()[j].clone()).collect(),
            diagnostics: BTreeMap::new(),
            seed: None,
            notes: sample.notes().to_vec(),
        }
    }
}

/// Assignment of trial rows to cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub k: usize,
    /// Fold of each trial row, in `sample.trial_rows()` order.
    pub fold_assignment: Vec<usize>,
    pub seed: u64,
}

impl CrossFitPlan {
    /// Random balanced partition: fold sizes differ by at most one.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("cross-fitting needs at least 2 folds, got {k}")));
        }
        if n < k {
            return Err(Error::InvalidInput(format!("{n} trial rows cannot fill {k} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, u64::MAX));
        let mut fold_assignment = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            fold_assignment[i] = pos % k;
        }
        Ok(CrossFitPlan {
            k,
            fold_assignment,
            seed,
        })
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Covariates the estimators adjust for, validated against the sample's pattern.
pub fn adjustment_set(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<Vec<usize>> {
    let pattern = detect_pattern(sample);
    match &cfg.covariates {
        None => Ok(pattern.obs_idx),
        Some(cols) => {
            for &j in cols {
                if j >= sample.p() {
                    return Err(Error::InvalidInput(format!("covariate index {j} out of range")));
                }
                if !pattern.obs_idx.contains(&j) {
                    return Err(Error::PatternMismatch(format!(
                        "covariate '{}' is not observed in both strata",
                        sample.names()[j]
                    )));
                }
            }
            Ok(cols.clone())
        }
    }
}

fn check_e1(e1: f64) -> Result<()> {
    if !(e1 > 0.0 && e1 < 1.0) {
        return Err(Error::InvalidInput(format!("e1 must lie in (0, 1), got {e1}")));
    }
    Ok(())
}

fn arms_with_min(sample: &CombinedSample, min: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (treated, control) = sample.arms()?;
    for (rows, arm) in [(&treated, 1u8), (&control, 0u8)] {
        if rows.is_empty() {
            return Err(Error::EmptyArm(arm));
        }
        if rows.len() < min {
            return Err(Error::InsufficientRows {
                stratum: format!("trial arm A={arm}"),
                rows: rows.len(),
            });
        }
    }
    Ok((treated, control))
}

fn effective_ridge(sample: &CombinedSample, cfg: &EstimatorConfig) -> f64 {
    if sample.is_imputed() {
        cfg.ridge.max(IMPUTED_RIDGE)
    } else {
        cfg.ridge
    }
}

fn fit_outcome(
    sample: &CombinedSample,
    rows: &[usize],
    cols: &[usize],
    model: OutcomeModel,
    ridge: f64,
) -> Result<LinearFit> {
    let y = sample.outcomes(rows);
    match model {
        OutcomeModel::InterceptOnly => Ok(LinearFit::constant(&y)),
        OutcomeModel::Linear => fit_ols(&sample.design(rows, cols), &y, ridge),
    }
}

/// Mean outcome difference between trial arms.
pub fn difference_in_means(sample: &CombinedSample) -> Result<AteEstimate> {
    let (treated, control) = arms_with_min(sample, 1)?;
    let mu1 = crate::data::mean(&sample.outcomes(&treated));
    let mu0 = crate::data::mean(&sample.outcomes(&control));
    let mut est = AteEstimate::new(EstimatorKind::Dm, mu1 - mu0, sample, &[]);
    est.diagnostics.insert("n_treated".into(), treated.len() as f64);
    est.diagnostics.insert("n_control".into(), control.len() as f64);
    Ok(est)
}

/// Outcome surfaces fitted per arm on the trial, averaged over the observational rows.
pub fn g_formula(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<AteEstimate> {
    let cols = adjustment_set(sample, cfg)?;
    let (treated, control) = arms_with_min(sample, 2)?;
    let ridge = effective_ridge(sample, cfg);
    let mu1 = fit_outcome(sample, &treated, &cols, cfg.outcome_model, ridge)?;
    let mu0 = fit_outcome(sample, &control, &cols, cfg.outcome_model, ridge)?;
    let x_obs = sample.design(sample.obs_rows(), &cols);
    let p1 = mu1.predict(&x_obs);
    let p0 = mu0.predict(&x_obs);
    let value = p1.iter().zip(&p0).map(|(a, b)| a - b).sum::<f64>() / sample.m() as f64;
    let mut est = AteEstimate::new(EstimatorKind::GFormula, value, sample, &cols);
    est.diagnostics.insert("r2_treated".into(), mu1.r_squared);
    est.diagnostics.insert("r2_control".into(), mu0.r_squared);
    if ridge > 0.0 {
        est.diagnostics.insert("ridge".into(), ridge);
    }
    Ok(est)
}

struct Weights {
    /// Per trial row, in `trial_rows()` order: n / (m α̂(x)).
    w: Vec<f64>,
    converged: bool,
}

fn selection_weights(sample: &CombinedSample, cols: &[usize], model: SelectionModel) -> Result<Weights> {
    let (n, m) = (sample.n() as f64, sample.m() as f64);
    match model {
        SelectionModel::Constant => Ok(Weights {
            w: vec![1.0; sample.n()],
            converged: true,
        }),
        SelectionModel::Logistic => {
            let all: Vec<usize> = (0..sample.rows()).collect();
            let x = sample.design(&all, cols);
            let s: Vec<bool> = all.iter().map(|&i| sample.is_trial(i)).collect();
            let fit = fit_logistic(&x, &s)?;
            if !fit.converged {
                log::warn!("selection model did not converge after {} iterations", fit.iterations);
            }
            let w = sample
                .trial_rows()
                .iter()
                .map(|&i| {
                    let row: Vec<f64> = cols.iter().map(|&j| sample.covariate_matrix()[(i, j)]).collect();
                    n / (m * fit.odds(&row))
                })
                .collect();
            Ok(Weights {
                w,
                converged: fit.converged,
            })
        }
    }
}

fn weight_diagnostics(est: &mut AteEstimate, w: &Weights) {
    let mut sorted = w.w.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let max = *sorted.last().unwrap();
    est.diagnostics.insert("weight_min".into(), sorted[0]);
    est.diagnostics.insert("weight_max".into(), max);
    est.diagnostics.insert("weight_median".into(), median);
    est.diagnostics
        .insert("selection_converged".into(), if w.converged { 1.0 } else { 0.0 });
    let degenerate = max > 1e6 * median;
    est.diagnostics
        .insert("degenerate_weights".into(), if degenerate { 1.0 } else { 0.0 });
    if degenerate {
        log::warn!("degenerate IPSW weights: max {max:.3e} vs median {median:.3e}");
    }
}

/// Inverse probability of sampling weighting with logistic selection odds.
pub fn ipsw(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<AteEstimate> {
    check_e1(cfg.e1)?;
    let cols = adjustment_set(sample, cfg)?;
    arms_with_min(sample, 1)?;
    let w = selection_weights(sample, &cols, cfg.selection_model)?;
    let rows = sample.trial_rows();
    let value = if cfg.normalize {
        let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
        for (k, &i) in rows.iter().enumerate() {
            let y = sample.outcome(i).unwrap();
            if sample.treatment(i) == Some(true) {
                s1 += w.w[k] * y;
                w1 += w.w[k];
            } else {
                s0 += w.w[k] * y;
                w0 += w.w[k];
            }
        }
        s1 / w1 - s0 / w0
    } else {
        rows.iter()
            .enumerate()
            .map(|(k, &i)| {
                let y = sample.outcome(i).unwrap();
                let a = if sample.treatment(i) == Some(true) { 1.0 } else { 0.0 };
                w.w[k] * y * (a / cfg.e1 - (1.0 - a) / (1.0 - cfg.e1))
            })
            .sum::<f64>()
            / sample.n() as f64
    };
    let mut est = AteEstimate::new(EstimatorKind::Ipsw, value, sample, &cols);
    weight_diagnostics(&mut est, &w);
    est.diagnostics
        .insert("normalized".into(), if cfg.normalize { 1.0 } else { 0.0 });
    Ok(est)
}

/// Augmented IPSW: weighted cross-fitted trial residuals plus the G-formula term.
pub fn aipsw(sample: &CombinedSample, cfg: &EstimatorConfig) -> Result<AteEstimate> {
    check_e1(cfg.e1)?;
    let cols = adjustment_set(sample, cfg)?;
    let (treated, control) = arms_with_min(sample, 2)?;
    let ridge = effective_ridge(sample, cfg);
    let plan = CrossFitPlan::new(sample.n(), cfg.folds, cfg.seed)?;
    let w = selection_weights(sample, &cols, cfg.selection_model)?;
    let rows = sample.trial_rows();

    let mut trial_term = 0.0;
    for fold in 0..plan.k {
        let train = |arm: bool| -> Vec<usize> {
            rows.iter()
                .enumerate()
                .filter(|(k, &i)| plan.fold_assignment[*k] != fold && sample.treatment(i) == Some(arm))
                .map(|(_, &i)| i)
                .collect()
        };
        let (tr1, tr0) = (train(true), train(false));
        for (rows_arm, arm) in [(&tr1, 1u8), (&tr0, 0u8)] {
            if rows_arm.len() < 2 {
                return Err(Error::InsufficientRows {
                    stratum: format!("trial arm A={arm} outside fold {fold}"),
                    rows: rows_arm.len(),
                });
            }
        }
        let mu1 = fit_outcome(sample, &tr1, &cols, cfg.outcome_model, ridge)?;
        let mu0 = fit_outcome(sample, &tr0, &cols, cfg.outcome_model, ridge)?;
        for (k, &i) in rows.iter().enumerate() {
            if plan.fold_assignment[k] != fold {
                continue;
            }
            let x: Vec<f64> = cols.iter().map(|&j| sample.covariate_matrix()[(i, j)]).collect();
            let y = sample.outcome(i).unwrap();
            let term = if sample.treatment(i) == Some(true) {
                (y - mu1.predict_row(&x)) / cfg.e1
            } else {
                -(y - mu0.predict_row(&x)) / (1.0 - cfg.e1)
            };
            trial_term += w.w[k] * term;
        }
    }
    trial_term /= sample.n() as f64;

    let mu1 = fit_outcome(sample, &treated, &cols, cfg.outcome_model, ridge)?;
    let mu0 = fit_outcome(sample, &control, &cols, cfg.outcome_model, ridge)?;
    let x_obs = sample.design(sample.obs_rows(), &cols);
    let obs_term = mu1
        .predict(&x_obs)
        .iter()
        .zip(mu0.predict(&x_obs))
        .map(|(a, b)| a - b)
        .sum::<f64>()
        / sample.m() as f64;

    let mut est = AteEstimate::new(EstimatorKind::Aipsw, trial_term + obs_term, sample, &cols);
    weight_diagnostics(&mut est, &w);
    est.diagnostics.insert("folds".into(), plan.k as f64);
    est.diagnostics.insert("r2_treated".into(), mu1.r_squared);
    est.diagnostics.insert("r2_control".into(), mu0.r_squared);
    est.seed = Some(cfg.seed);
    Ok(est)
}

pub fn estimate(sample: &CombinedSample, kind: EstimatorKind, cfg: &EstimatorConfig) -> Result<AteEstimate> {
    match kind {
        EstimatorKind::Dm => difference_in_means(sample),
        EstimatorKind::GFormula => g_formula(sample, cfg),
        EstimatorKind::Ipsw => ipsw(sample, cfg),
        EstimatorKind::Aipsw => aipsw(sample, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub low: f64,
    pub high: f64,
    pub reps: usize,
    pub skipped: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stratified percentile bootstrap: rows are resampled with replacement
/// independently within the trial and observational strata. Replicate `r`
/// draws from stream `r` of `seed`, so results do not depend on scheduling.
/// Failing replicates are skipped; more than 5% skipped is an error.
pub fn bootstrap_ci<F>(sample: &CombinedSample, estimator: F, reps: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&CombinedSample) -> Result<f64> + Sync,
{
    if reps < 100 {
        return Err(Error::InvalidInput(format!("bootstrap needs at least 100 replicates, got {reps}")));
    }
    let trial = sample.trial_rows();
    let obs = sample.obs_rows();
    let draws: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let mut rows = Vec::with_capacity(sample.rows());
            rows.extend((0..trial.len()).map(|_| trial[rng.random_range(0..trial.len())]));
            rows.extend((0..obs.len()).map(|_| obs[rng.random_range(0..obs.len())]));
            let resampled = sample.subset_rows(&rows).ok()?;
            match estimator(&resampled) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("bootstrap replicate {r} skipped: {e}");
                    None
                }
            }
        })
        .collect();
    let mut values: Vec<f64> = draws.into_iter().flatten().collect();
    let skipped = reps - values.len();
    if skipped * 20 > reps {
        return Err(Error::BootstrapFailure { skipped, reps });
    }
    values.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        low: quantile_sorted(&values, 0.025),
        high: quantile_sorted(&values, 0.975),
        reps,
        skipped,
    })
}

/// Point estimate plus, when `reps > 0`, a full-pipeline bootstrap interval.
pub fn estimate_with_ci(
    sample: &CombinedSample,
    kind: EstimatorKind,
    cfg: &EstimatorConfig,
    reps: usize,
    seed: u64,
) -> Result<AteEstimate> {
    let mut est = estimate(sample, kind, cfg)?;
    est.seed = Some(seed);
    if reps > 0 {
        let ci = bootstrap_ci(sample, |s| estimate(s, kind, cfg).map(|e| e.value), reps, seed)?;
        est.ci = Some((ci.low, ci.high));
        est.diagnostics.insert("bootstrap_reps".into(), reps as f64);
        est.diagnostics.insert("bootstrap_skipped".into(), ci.skipped as f64);
    }
    Ok(est)
}
