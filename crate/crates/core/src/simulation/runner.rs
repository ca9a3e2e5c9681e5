use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{generate_with_oracle, Generated, ScenarioSpec};
use crate::data::{estimate_moments, CombinedSample, CovSource, CovariatePattern, MissingLocation, Stratum};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig, EstimatorKind};
use crate::sensitivity::{linear_impute, theoretical_bias};
use crate::stream_rng;

/// What happens to the missing covariates of a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handling {
    /// Estimators adjust for the remaining covariates only.
    Drop,
    /// Covariates are blanked at the location, then linearly imputed.
    Impute(MissingLocation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub label: String,
    pub missing: Vec<usize>,
    pub handling: Handling,
}

impl PatternSpec {
    pub fn none() -> Self {
        PatternSpec {
            label: "none".into(),
            missing: Vec::new(),
            handling: Handling::Drop,
        }
    }

    /// Drops the listed covariates; label joins their 1-based names with '+'.
    pub fn drop(missing: &[usize]) -> Self {
        PatternSpec {
            label: missing.iter().map(|j| format!("X{}", j + 1)).collect::<Vec<_>>().join("+"),
            missing: missing.to_vec(),
            handling: Handling::Drop,
        }
    }

    pub fn impute(missing: usize, location: MissingLocation) -> Self {
        let side = match location {
            MissingLocation::MissingInTrial => "missing in trial",
            MissingLocation::MissingInObservational => "missing in obs",
            MissingLocation::TotallyMissing => "totally missing",
        };
        PatternSpec {
            label: format!("X{} {side} / impute", missing + 1),
            missing: vec![missing],
            handling: Handling::Impute(location),
        }
    }

    /// Applies the pattern to a fully observed sample.
    pub fn apply(&self, full: &CombinedSample) -> Result<CombinedSample> {
        match self.handling {
            Handling::Drop => {
                if self.missing.is_empty() {
                    return Ok(full.clone());
                }
                let keep: Vec<usize> = (0..full.p()).filter(|j| !self.missing.contains(j)).collect();
                full.select_covariates(&keep)
            }
            Handling::Impute(location) => {
                let mut masked = full.clone();
                for &j in &self.missing {
                    masked = match location {
                        MissingLocation::MissingInTrial => masked.masked(j, Stratum::Trial),
                        MissingLocation::MissingInObservational => masked.masked(j, Stratum::Observational),
                        MissingLocation::TotallyMissing => {
                            return Err(Error::PatternMismatch("a totally missing covariate cannot be imputed".into()))
                        }
                    };
                }
                let missing: Vec<_> = self.missing.iter().map(|&j| (j, location)).collect();
                linear_impute(&masked, &CovariatePattern::with_missing(full.p(), &missing))
            }
        }
    }
}

/// One value in the long-format result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: u64,
    pub pattern: String,
    /// Estimator name or derived quantity (e.g. "theoretical_bias", "box_m_p").
    pub estimator: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub pattern: String,
    pub estimator: String,
    pub reps: usize,
    pub mean: f64,
    /// `None` with a single replicate.
    pub sd: Option<f64>,
    /// Monte Carlo standard error SD / √reps.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub spec: ScenarioSpec,
    pub true_ate: f64,
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn summarize(rows: &[ReplicateRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.pattern.clone(), r.estimator.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let k = v.len();
            let mean = v.iter().sum::<f64>() / k as f64;
            let sd = (k > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt());
            SummaryRow {
                pattern: key.0,
                estimator: key.1,
                reps: k,
                mean,
                sd,
                se: sd.map(|s| s / (k as f64).sqrt()),
            }
        })
        .collect()
}

impl ScenarioResult {
    pub fn new(name: &str, spec: ScenarioSpec, rows: Vec<ReplicateRow>, failures: Vec<String>) -> Self {
        let summary = summarize(&rows);
        ScenarioResult {
            name: name.into(),
            true_ate: spec.true_ate(),
            spec,
            rows,
            summary,
            failures,
            metadata: BTreeMap::new(),
        }
    }

    pub fn get(&self, pattern: &str, estimator: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.pattern == pattern && s.estimator == estimator)
    }

    pub fn values(&self, pattern: &str, estimator: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.pattern == pattern && r.estimator == estimator)
            .map(|r| r.value)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "pattern", "estimator", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.replicate.to_string(),
                r.pattern.clone(),
                r.estimator.clone(),
                format!("{:.16e}", r.value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<28} {:<20} {:>12} {:>10} {:>10}\n", "pattern", "estimator", "mean", "sd", "se");
        for s in &self.summary {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<28} {:<20} {:>12.4} {:>10} {:>10}\n",
                s.pattern,
                s.estimator,
                s.mean,
                opt(s.sd),
                opt(s.se)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub estimator: EstimatorConfig,
    /// Σ source for the theoretical-bias overlay on the oracle data; `None` disables it.
    pub overlay_cov: Option<CovSource>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            estimator: EstimatorConfig::default(),
            overlay_cov: Some(CovSource::TrialOnly),
        }
    }
}

/// Runs replicates `first_replicate .. first_replicate + reps` in parallel.
/// Each replicate's closure receives its own RNG stream; rows come back in
/// replicate order regardless of scheduling.
pub fn run_replicates<F>(spec: &ScenarioSpec, f: F) -> (Vec<ReplicateRow>, Vec<String>)
where
    F: Fn(u64, &mut rand_chacha::ChaCha8Rng) -> std::result::Result<Vec<ReplicateRow>, String> + Sync,
{
    let first = spec.first_replicate;
    let out: Vec<std::result::Result<Vec<ReplicateRow>, String>> = (first..first + spec.reps as u64)
        .into_par_iter()
        .map(|r| f(r, &mut stream_rng(spec.seed, r)))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for o in out {
        match o {
            Ok(r) => rows.extend(r),
            Err(e) => failures.push(e),
        }
    }
    (rows, failures)
}

pub(crate) fn row(replicate: u64, pattern: &str, estimator: &str, value: f64) -> ReplicateRow {
    ReplicateRow {
        replicate,
        pattern: pattern.into(),
        estimator: estimator.into(),
        value,
    }
}

/// Theoretical bias of dropping `missing` from the oracle sample.
pub fn oracle_bias(full: &CombinedSample, spec: &ScenarioSpec, missing: &[usize], cov: CovSource) -> Result<f64> {
    if missing.is_empty() {
        return Ok(0.0);
    }
    let pattern = CovariatePattern::dropping(full.p(), missing);
    let complete = CovariatePattern::complete(full.p());
    let moments = estimate_moments(full, &complete, cov)?;
    let delta: Vec<f64> = missing.iter().map(|&j| spec.delta[j]).collect();
    Ok(theoretical_bias(&delta, &moments, &pattern, None)?.bias)
}

/// Regenerates data per replicate and applies every estimator under every pattern.
pub fn run_scenario(
    spec: &ScenarioSpec,
    patterns: &[PatternSpec],
    estimators: &[EstimatorKind],
    options: &RunOptions,
) -> Result<ScenarioResult> {
    let spec = spec.resolved()?;
    let (rows, failures) = run_replicates(&spec, |r, rng| {
        let Generated { sample: full, .. } = generate_with_oracle(&spec, rng).map_err(|e| format!("replicate {r}: {e}"))?;
        let mut out = vec![row(r, "all", "trial_size", full.n() as f64)];
        let mut errors = Vec::new();
        for pat in patterns {
            let data = match pat.apply(&full) {
                Ok(d) => d,
                Err(e) => {
                    errors.push(format!("replicate {r} pattern {}: {e}", pat.label));
                    continue;
                }
            };
            for &kind in estimators {
                match estimate(&data, kind, &options.estimator) {
                    Ok(est) => out.push(row(r, &pat.label, kind.name(), est.value)),
                    Err(e) => errors.push(format!("replicate {r} pattern {} {kind}: {e}", pat.label)),
                }
            }
            if let (Some(cov), Handling::Drop) = (options.overlay_cov, pat.handling) {
                match oracle_bias(&full, &spec, &pat.missing, cov) {
                    Ok(b) => out.push(row(r, &pat.label, "theoretical_bias", b)),
                    Err(e) => errors.push(format!("replicate {r} pattern {} overlay: {e}", pat.label)),
                }
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors.join("; "))
        }
    });
    let mut result = ScenarioResult::new(&spec.name, spec.clone(), rows, failures);
    result.metadata.insert(
        "sign_convention".into(),
        crate::sensitivity::SIGN_CONVENTION.into(),
    );
    if let Some(cov) = options.overlay_cov {
        result
            .metadata
            .insert("overlay_cov_source".into(), serde_json::to_value(cov)?);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let rows: Vec<ReplicateRow> = [1.0, 2.0, 3.0, 6.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| row(i as u64, "p", "e", v))
            .collect();
        let s = &summarize(&rows)[0];
        assert_eq!(s.mean, 3.0);
        assert!((s.sd.unwrap() - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.se.unwrap() - s.sd.unwrap() / 2.0).abs() < 1e-15);
        let single = summarize(&rows[..1]);
        assert_eq!(single[0].sd, None);
    }

    #[test]
    fn pattern_labels() {
        assert_eq!(PatternSpec::drop(&[0, 4]).label, "X1+X5");
        assert_eq!(
            PatternSpec::impute(0, MissingLocation::MissingInTrial).label,
            "X1 missing in trial / impute"
        );
    }
}
