//! Named experiments on the five-covariate synthetic design.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::runner::{oracle_bias, row, run_replicates, run_scenario, PatternSpec, RunOptions, ScenarioResult};
use super::spec::{generate, identity_with, ScenarioSpec};
use crate::data::{estimate_moments, CovSource, CovariatePattern, MissingLocation, Stratum};
use crate::error::{Error, Result};
use crate::estimators::{g_formula, EstimatorConfig, EstimatorKind};
use crate::sensitivity::{procedure_missing_in_obs, proxy_bias, robinson_rlearner, theoretical_bias};
use crate::stats::{box_m_between_strata, Stage1};

pub const NAMED_SCENARIOS: [&str; 8] = [
    "paper-fig3",
    "paper-table4",
    "proxy-sweep",
    "imputation",
    "boxm-sweep",
    "heterogeneity-A",
    "heterogeneity-B",
    "correlation-sweep",
];

pub fn standard_patterns() -> Vec<PatternSpec> {
    vec![
        PatternSpec::none(),
        PatternSpec::drop(&[0]),
        PatternSpec::drop(&[2]),
        PatternSpec::drop(&[0, 4]),
        PatternSpec::drop(&[1]),
        PatternSpec::drop(&[3]),
        PatternSpec::drop(&[4]),
    ]
}

fn base(name: &str, reps: usize, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        reps,
        seed,
        ..ScenarioSpec::baseline()
    }
}

fn label(v: f64) -> String {
    format!("{v}")
}

fn finish(name: &str, spec: ScenarioSpec, rows: Vec<super::runner::ReplicateRow>, failures: Vec<String>) -> ScenarioResult {
    let mut r = ScenarioResult::new(name, spec, rows, failures);
    r.metadata.insert(
        "sign_convention".into(),
        crate::sensitivity::SIGN_CONVENTION.into(),
    );
    r
}

/// Every estimator under the complete pattern and each dropped-covariate pattern.
pub fn dropped_covariates(reps: usize, seed: u64) -> Result<ScenarioResult> {
    run_scenario(
        &base("paper-fig3", reps, seed),
        &standard_patterns(),
        &EstimatorKind::ALL,
        &RunOptions::default(),
    )
}

/// Linear-CATE ATE for hypothesised E[X1] when X1 is unobserved in the observational sample.
pub fn hypothesized_means(reps: usize, seed: u64, expectations: &[f64], stage1: Stage1) -> Result<ScenarioResult> {
    let spec = base("paper-table4", reps, seed).resolved()?;
    let (rows, failures) = run_replicates(&spec, |r, rng| {
        let full = generate(&spec, rng).map_err(|e| e.to_string())?;
        let masked = full.masked(0, Stratum::Observational);
        let ests = procedure_missing_in_obs(&masked, 0, expectations, spec.e1, stage1)
            .map_err(|e| format!("replicate {r}: {e}"))?;
        let mut out: Vec<_> = ests
            .iter()
            .zip(expectations)
            .map(|(e, x)| row(r, "X1 missing in obs", &format!("E[X1]={}", label(*x)), e.value))
            .collect();
        out.push(row(r, "X1 missing in obs", "delta1_hat", ests[0].diagnostics["delta_mis"]));
        Ok(out)
    });
    let mut res = finish("paper-table4", spec, rows, failures);
    res.metadata
        .insert("stage1".into(), serde_json::to_value(stage1)?);
    Ok(res)
}

/// G-formula bias with X1 dropped as cov(X1, X5) varies, plus δ̂5 of the reduced Robinson fit.
pub fn correlation_sweep(rhos: &[f64], reps: usize, seed: u64) -> Result<ScenarioResult> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut last = None;
    for &rho in rhos {
        let spec = ScenarioSpec {
            cov: identity_with(5, &[(0, 4, rho)]),
            ..base("correlation-sweep", reps, seed)
        }
        .resolved()?;
        let pattern = format!("rho={}", label(rho));
        let drop = PatternSpec::drop(&[0]);
        let (r, f) = run_replicates(&spec, |r, rng| {
            let full = generate(&spec, rng).map_err(|e| e.to_string())?;
            let reduced = drop.apply(&full).map_err(|e| e.to_string())?;
            let g = g_formula(&reduced, &EstimatorConfig::default()).map_err(|e| e.to_string())?;
            let fit = robinson_rlearner(&reduced, &[0, 1, 2, 3], spec.e1, Stage1::Linear).map_err(|e| e.to_string())?;
            let theory = oracle_bias(&full, &spec, &[0], CovSource::TrialOnly).map_err(|e| e.to_string())?;
            Ok(vec![
                row(r, &pattern, "gformula", g.value),
                row(r, &pattern, "delta5_hat", fit.delta[3]),
                row(r, &pattern, "theoretical_bias", theory),
            ])
        });
        rows.extend(r);
        failures.extend(f);
        last = Some(spec);
    }
    let spec = last.ok_or_else(|| Error::InvalidInput("no correlation values".into()))?;
    Ok(finish("correlation-sweep", spec, rows, failures))
}

/// Spec for the proxy experiment: independent covariates, selection on X1 only.
pub fn proxy_spec(reps: usize, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        cov: identity_with(5, &[]),
        beta_s: vec![-0.4, 0.0, 0.0, 0.0, 0.0],
        ..base("proxy-sweep", reps, seed)
    }
}

/// G-formula with X1 replaced by X1 + σ η against the attenuation formula.
pub fn proxy_sweep(sigmas: &[f64], reps: usize, seed: u64) -> Result<ScenarioResult> {
    let spec = proxy_spec(reps, seed).resolved()?;
    let (rows, failures) = run_replicates(&spec, |r, rng| {
        let full = generate(&spec, rng).map_err(|e| e.to_string())?;
        let x1: Vec<f64> = (0..full.rows()).map(|i| full.covariate_matrix()[(i, 0)]).collect();
        let noise: Vec<f64> = (0..full.rows()).map(|_| rng.sample(StandardNormal)).collect();
        let mean_in = |s: Stratum| crate::data::mean(&full.column_values(full.stratum_rows(s), 0));
        let shift = mean_in(Stratum::Observational) - mean_in(Stratum::Trial);
        let sigma_mis = crate::data::variance(&full.column_values(full.trial_rows(), 0)).sqrt();
        let mut out = Vec::new();
        for &sigma in sigmas {
            let pattern = format!("sigma_prox={}", label(sigma));
            let proxy: Vec<f64> = x1.iter().zip(&noise).map(|(x, z)| x + sigma * z).collect();
            let data = full.with_covariate_values(0, &proxy).map_err(|e| e.to_string())?;
            let g = g_formula(&data, &EstimatorConfig::default()).map_err(|e| format!("replicate {r}: {e}"))?;
            let theory = proxy_bias(spec.delta[0], shift, sigma_mis, sigma).map_err(|e| e.to_string())?;
            out.push(row(r, &pattern, "gformula", g.value));
            out.push(row(r, &pattern, "theoretical_bias", theory));
        }
        Ok(out)
    });
    Ok(finish("proxy-sweep", spec, rows, failures))
}

/// Linear imputation versus dropping, for X1 and X3 missing on either side.
pub fn imputation(reps: usize, seed: u64) -> Result<ScenarioResult> {
    let mut patterns = Vec::new();
    for j in [0usize, 2] {
        let mut d = PatternSpec::drop(&[j]);
        d.label = format!("X{} / drop", j + 1);
        patterns.push(d);
        patterns.push(PatternSpec::impute(j, MissingLocation::MissingInTrial));
        patterns.push(PatternSpec::impute(j, MissingLocation::MissingInObservational));
    }
    let options = RunOptions {
        overlay_cov: None,
        ..RunOptions::default()
    };
    run_scenario(
        &base("imputation", reps, seed),
        &patterns,
        &[EstimatorKind::GFormula, EstimatorKind::Ipsw],
        &options,
    )
}

/// Per selection strength on X1: Box's M p-value, G-formula without X1, and
/// the bias predicted with the observational covariance.
pub fn sweep_selection_strength(base_spec: &ScenarioSpec, beta_s1_values: &[f64], reps: usize) -> Result<ScenarioResult> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut last = None;
    for &v in beta_s1_values {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("selection coefficient {v} is not finite")));
        }
        let mut spec = base_spec.clone();
        spec.beta_s[0] = v;
        spec.beta_s0 = None;
        spec.reps = reps;
        let spec = spec.resolved()?;
        let pattern = format!("beta_s1={}", label(v));
        let (r, f) = run_replicates(&spec, |r, rng| {
            let full = generate(&spec, rng).map_err(|e| e.to_string())?;
            let all: Vec<usize> = (0..full.p()).collect();
            let boxm = box_m_between_strata(&full, &all).map_err(|e| e.to_string())?;
            let reduced = PatternSpec::drop(&[0]).apply(&full).map_err(|e| e.to_string())?;
            let g = g_formula(&reduced, &EstimatorConfig::default()).map_err(|e| e.to_string())?;
            let theory = oracle_bias(&full, &spec, &[0], CovSource::ObservationalOnly).map_err(|e| e.to_string())?;
            Ok(vec![
                row(r, &pattern, "box_m_p", boxm.p_value),
                row(r, &pattern, "gformula", g.value),
                row(r, &pattern, "theoretical_bias", theory),
            ])
        });
        rows.extend(r);
        failures.extend(f);
        last = Some(spec);
    }
    let spec = last.ok_or_else(|| Error::InvalidInput("no selection strengths".into()))?;
    let mut res = finish("boxm-sweep", spec, rows, failures);
    res.metadata.insert("box_m_approximation".into(), "chi-square".into());
    res.metadata.insert("overlay_cov_source".into(), "observational_only".into());
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    /// cov(X1, X5) differs between the trial pool and the target population.
    A,
    /// A covariance entry not involving X1 differs.
    B,
}

pub fn heterogeneity_spec(which: Situation, reps: usize, seed: u64) -> ScenarioSpec {
    let trial_cov = match which {
        Situation::A => identity_with(5, &[(0, 4, -0.4)]),
        Situation::B => identity_with(5, &[(0, 4, 0.8), (1, 2, 0.6)]),
    };
    let name = match which {
        Situation::A => "heterogeneity-A",
        Situation::B => "heterogeneity-B",
    };
    ScenarioSpec {
        trial_cov: Some(trial_cov),
        selection_fraction: 0.1,
        ..base(name, reps, seed)
    }
}

/// Corrected ATE τ̂_obs − B̂ with X1 dropped, B̂ from the observational covariance.
pub fn heterogeneity_situations(which: Situation, reps: usize, seed: u64) -> Result<ScenarioResult> {
    let spec = heterogeneity_spec(which, reps, seed).resolved()?;
    let pattern = format!("situation {which:?}");
    let (rows, failures) = run_replicates(&spec, |r, rng| {
        let full = generate(&spec, rng).map_err(|e| e.to_string())?;
        let reduced = PatternSpec::drop(&[0]).apply(&full).map_err(|e| e.to_string())?;
        let tau_obs = g_formula(&reduced, &EstimatorConfig::default()).map_err(|e| e.to_string())?.value;
        let moments = estimate_moments(&full, &CovariatePattern::complete(5), CovSource::ObservationalOnly)
            .map_err(|e| e.to_string())?;
        let b = theoretical_bias(&[spec.delta[0]], &moments, &CovariatePattern::dropping(5, &[0]), None)
            .map_err(|e| e.to_string())?
            .bias;
        let all: Vec<usize> = (0..5).collect();
        let boxm = box_m_between_strata(&full, &all).map_err(|e| e.to_string())?;
        Ok(vec![
            row(r, &pattern, "tau_obs", tau_obs),
            row(r, &pattern, "bias_hat", b),
            row(r, &pattern, "corrected", tau_obs - b),
            row(r, &pattern, "box_m_p", boxm.p_value),
            row(r, &pattern, "trial_size", full.n() as f64),
        ])
    });
    Ok(finish(&spec.name.clone(), spec, rows, failures))
}

/// Dispatches a named scenario with its default parameters.
pub fn run_named(name: &str, reps: usize, seed: u64) -> Result<ScenarioResult> {
    match name {
        "paper-fig3" => dropped_covariates(reps, seed),
        "paper-table4" => hypothesized_means(reps, seed, &[0.8, 0.9, 1.0, 1.1, 1.2], Stage1::Linear),
        "proxy-sweep" => proxy_sweep(&[0.0, 0.5, 1.0, 2.0, 3.0], reps, seed),
        "imputation" => imputation(reps, seed),
        "boxm-sweep" => sweep_selection_strength(&base("boxm-sweep", reps, seed), &[0.0, -0.4, -1.0, -2.0], reps),
        "heterogeneity-A" => heterogeneity_situations(Situation::A, reps, seed),
        "heterogeneity-B" => heterogeneity_situations(Situation::B, reps, seed),
        "correlation-sweep" => correlation_sweep(&[0.05, 0.5, 0.95], reps, seed),
        other => Err(Error::InvalidInput(format!(
            "unknown scenario '{other}' (expected one of {})",
            NAMED_SCENARIOS.join(", ")
        ))),
    }
}
