//! Combined trial + observational table, covariate-pattern bookkeeping,
//! moment estimation and CSV ingestion.
//!
//! Absent covariate cells are stored as `NaN`; construction rejects
//! non-finite observed values, so `NaN` never means anything else.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    /// S = 1
    Trial,
    /// S = 0
    Observational,
}

impl Stratum {
    pub fn label(self) -> &'static str {
        match self {
            Stratum::Trial => "trial (S=1)",
            Stratum::Observational => "observational (S=0)",
        }
    }
}

/// Unified trial + observational sample.
#[derive(Debug, Clone)]
pub struct CombinedSample {
    names: Vec<String>,
    covariates: DMatrix<f64>,
    study: Vec<bool>,
    treatment: Vec<Option<bool>>,
    outcome: Vec<Option<f64>>,
    trial_rows: Vec<usize>,
    obs_rows: Vec<usize>,
    has_outcomes: bool,
    imputed: Vec<usize>,
    notes: Vec<String>,
}

impl CombinedSample {
    /// Builds and validates a sample. `study[i]` is true for trial rows.
    pub fn new(
        names: Vec<String>,
        covariates: DMatrix<f64>,
        study: Vec<bool>,
        treatment: Vec<Option<bool>>,
        outcome: Vec<Option<f64>>,
    ) -> Result<Self> {
        let rows = covariates.nrows();
        if names.len() != covariates.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} covariate names for {} columns",
                names.len(),
                covariates.ncols()
            )));
        }
        if names.is_empty() {
            return Err(Error::InvalidInput("at least one covariate is required".into()));
        }
        if study.len() != rows || treatment.len() != rows || outcome.len() != rows {
            return Err(Error::InvalidInput("column lengths disagree".into()));
        }
        let trial_rows: Vec<usize> = (0..rows).filter(|&i| study[i]).collect();
        let obs_rows: Vec<usize> = (0..rows).filter(|&i| !study[i]).collect();
        if trial_rows.is_empty() {
            return Err(Error::EmptyStratum(Stratum::Trial.label().into()));
        }
        if obs_rows.is_empty() {
            return Err(Error::EmptyStratum(Stratum::Observational.label().into()));
        }
        for &i in &obs_rows {
            if treatment[i].is_some() || outcome[i].is_some() {
                return Err(Error::InvalidInput(format!(
                    "observational row {i} carries a treatment or outcome value"
                )));
            }
        }
        let has_outcomes = trial_rows
            .iter()
            .any(|&i| treatment[i].is_some() || outcome[i].is_some());
        if has_outcomes {
            for &i in &trial_rows {
                if treatment[i].is_none() || outcome[i].is_none() {
                    return Err(Error::InvalidInput(format!(
                        "trial row {i} is missing its treatment or outcome"
                    )));
                }
                if let Some(y) = outcome[i] {
                    if !y.is_finite() {
                        return Err(Error::InvalidInput(format!("trial row {i} has a non-finite outcome")));
                    }
                }
            }
        }
        for (j, name) in names.iter().enumerate() {
            for (stratum, idx) in [(Stratum::Trial, &trial_rows), (Stratum::Observational, &obs_rows)] {
                let absent = idx.iter().filter(|&&i| covariates[(i, j)].is_nan()).count();
                if absent != 0 && absent != idx.len() {
                    return Err(Error::PatternViolation {
                        column: name.clone(),
                        stratum: stratum.label().into(),
                    });
                }
                if idx.iter().any(|&i| covariates[(i, j)].is_infinite()) {
                    return Err(Error::InvalidInput(format!("covariate '{name}' has an infinite value")));
                }
            }
        }
        Ok(CombinedSample {
            names,
            covariates,
            study,
            treatment,
            outcome,
            trial_rows,
            obs_rows,
            has_outcomes,
            imputed: Vec::new(),
            notes: Vec::new(),
        })
    }

    /// Stacks a trial block on top of an observational block.
    pub fn from_strata(
        names: Vec<String>,
        trial_x: &DMatrix<f64>,
        treatment: &[bool],
        outcome: &[f64],
        obs_x: &DMatrix<f64>,
    ) -> Result<Self> {
        let (n, m, p) = (trial_x.nrows(), obs_x.nrows(), trial_x.ncols());
        if obs_x.ncols() != p {
            return Err(Error::InvalidInput("trial and observational blocks differ in width".into()));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::InvalidInput("treatment/outcome length differs from trial rows".into()));
        }
        let mut x = DMatrix::zeros(n + m, p);
        x.rows_mut(0, n).copy_from(trial_x);
        x.rows_mut(n, m).copy_from(obs_x);
        let mut study = vec![true; n];
        study.extend(std::iter::repeat_n(false, m));
        let mut a: Vec<Option<bool>> = treatment.iter().map(|&t| Some(t)).collect();
        a.extend(std::iter::repeat_n(None, m));
        let mut y: Vec<Option<f64>> = outcome.iter().map(|&v| Some(v)).collect();
        y.extend(std::iter::repeat_n(None, m));
        CombinedSample::new(names, x, study, a, y)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn p(&self) -> usize {
        self.names.len()
    }

    /// Trial size.
    pub fn n(&self) -> usize {
        self.trial_rows.len()
    }

    /// Observational size.
    pub fn m(&self) -> usize {
        self.obs_rows.len()
    }

    pub fn rows(&self) -> usize {
        self.study.len()
    }

    pub fn trial_rows(&self) -> &[usize] {
        &self.trial_rows
    }

    pub fn obs_rows(&self) -> &[usize] {
        &self.obs_rows
    }

    pub fn stratum_rows(&self, stratum: Stratum) -> &[usize] {
        match stratum {
            Stratum::Trial => &self.trial_rows,
            Stratum::Observational => &self.obs_rows,
        }
    }

    pub fn is_trial(&self, row: usize) -> bool {
        self.study[row]
    }

    pub fn has_outcomes(&self) -> bool {
        self.has_outcomes
    }

    pub fn treatment(&self, row: usize) -> Option<bool> {
        self.treatment[row]
    }

    pub fn outcome(&self, row: usize) -> Option<f64> {
        self.outcome[row]
    }

    pub fn covariate(&self, row: usize, j: usize) -> Option<f64> {
        let v = self.covariates[(row, j)];
        (!v.is_nan()).then_some(v)
    }

    pub fn covariate_matrix(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// True when covariate `j` is present in every row of `stratum`.
    pub fn observed_in(&self, j: usize, stratum: Stratum) -> bool {
        self.stratum_rows(stratum)
            .first()
            .map(|&i| !self.covariates[(i, j)].is_nan())
            .unwrap_or(false)
    }

    /// Covariate indices filled in by imputation.
    pub fn imputed_columns(&self) -> &[usize] {
        &self.imputed
    }

    pub fn is_imputed(&self) -> bool {
        !self.imputed.is_empty()
    }

    /// Free-form provenance notes (e.g. ignored observational outcomes).
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub(crate) fn push_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Dense design matrix for `rows` × `cols`; callers must request observed cells.
    pub fn design(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.covariates[(rows[r], cols[c])])
    }

    pub fn column_values(&self, rows: &[usize], j: usize) -> Vec<f64> {
        rows.iter().map(|&i| self.covariates[(i, j)]).collect()
    }

    /// Trial treated/control row indices. Errors when the sample carries no outcomes.
    pub fn arms(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        if !self.has_outcomes {
            return Err(Error::InvalidInput("sample has no treatment/outcome columns".into()));
        }
        let treated = self
            .trial_rows
            .iter()
            .copied()
            .filter(|&i| self.treatment[i] == Some(true))
            .collect();
        let control = self
            .trial_rows
            .iter()
            .copied()
            .filter(|&i| self.treatment[i] == Some(false))
            .collect();
        Ok((treated, control))
    }

    /// Outcome values of `rows` (all must be trial rows).
    pub fn outcomes(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&i| self.outcome[i].expect("outcome requested for a row without one"))
            .collect()
    }

    /// Copy with covariate `j` blanked in `stratum`.
    pub fn masked(&self, j: usize, stratum: Stratum) -> CombinedSample {
        let mut out = self.clone();
        for &i in self.stratum_rows(stratum) {
            out.covariates[(i, j)] = f64::NAN;
        }
        out.imputed.retain(|&c| c != j);
        out
    }

    /// Copy restricted to the given rows (which may repeat, as in resampling).
    pub fn subset_rows(&self, rows: &[usize]) -> Result<CombinedSample> {
        let x = DMatrix::from_fn(rows.len(), self.p(), |r, c| self.covariates[(rows[r], c)]);
        let mut out = CombinedSample::new(
            self.names.clone(),
            x,
            rows.iter().map(|&i| self.study[i]).collect(),
            rows.iter().map(|&i| self.treatment[i]).collect(),
            rows.iter().map(|&i| self.outcome[i]).collect(),
        )?;
        out.imputed = self.imputed.clone();
        out.notes = self.notes.clone();
        Ok(out)
    }

    /// Copy restricted to the given covariate columns, in the given order.
    pub fn select_covariates(&self, cols: &[usize]) -> Result<CombinedSample> {
        let x = DMatrix::from_fn(self.rows(), cols.len(), |r, c| self.covariates[(r, cols[c])]);
        let mut out = CombinedSample::new(
            cols.iter().map(|&j| self.names[j].clone()).collect(),
            x,
            self.study.clone(),
            self.treatment.clone(),
            self.outcome.clone(),
        )?;
        out.imputed = cols
            .iter()
            .enumerate()
            .filter(|(_, j)| self.imputed.contains(j))
            .map(|(c, _)| c)
            .collect();
        out.notes = self.notes.clone();
        Ok(out)
    }

    /// Copy with covariate `j` replaced by `values` (one per row, `NaN` = absent).
    pub fn with_covariate_values(&self, j: usize, values: &[f64]) -> Result<CombinedSample> {
        if values.len() != self.rows() {
            return Err(Error::InvalidInput("replacement column has the wrong length".into()));
        }
        let mut x = self.covariates.clone();
        for (i, &v) in values.iter().enumerate() {
            x[(i, j)] = v;
        }
        let mut out = CombinedSample::new(
            self.names.clone(),
            x,
            self.study.clone(),
            self.treatment.clone(),
            self.outcome.clone(),
        )?;
        out.imputed = self.imputed.clone();
        out.notes = self.notes.clone();
        Ok(out)
    }

    pub(crate) fn mark_imputed(&mut self, j: usize) {
        if !self.imputed.contains(&j) {
            self.imputed.push(j);
            self.imputed.sort_unstable();
        }
    }

    /// Copy with every trial outcome mapped through `f`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> CombinedSample {
        let mut out = self.clone();
        for y in out.outcome.iter_mut().flatten() {
            *y = f(*y);
        }
        out
    }
}

/// Where a missing covariate is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingLocation {
    TotallyMissing,
    MissingInTrial,
    MissingInObservational,
}

/// Split of covariate indices into those observed in both strata and the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariatePattern {
    pub p: usize,
    pub obs_idx: Vec<usize>,
    pub mis_idx: Vec<usize>,
    /// Parallel to `mis_idx`.
    pub mis_location: Vec<MissingLocation>,
}

impl CovariatePattern {
    pub fn complete(p: usize) -> Self {
        CovariatePattern {
            p,
            obs_idx: (0..p).collect(),
            mis_idx: Vec::new(),
            mis_location: Vec::new(),
        }
    }

    /// Pattern where each listed covariate is missing at the given location.
    pub fn with_missing(p: usize, missing: &[(usize, MissingLocation)]) -> Self {
        let mut mis: Vec<(usize, MissingLocation)> = missing.to_vec();
        mis.sort_by_key(|(j, _)| *j);
        mis.dedup_by_key(|(j, _)| *j);
        CovariatePattern {
            p,
            obs_idx: (0..p).filter(|j| !mis.iter().any(|(m, _)| m == j)).collect(),
            mis_idx: mis.iter().map(|(j, _)| *j).collect(),
            mis_location: mis.iter().map(|(_, l)| *l).collect(),
        }
    }

    /// Pattern where each listed covariate is dropped from both strata.
    pub fn dropping(p: usize, dropped: &[usize]) -> Self {
        let missing: Vec<_> = dropped.iter().map(|&j| (j, MissingLocation::TotallyMissing)).collect();
        Self::with_missing(p, &missing)
    }

    pub fn location_of(&self, j: usize) -> Option<MissingLocation> {
        self.mis_idx.iter().position(|&m| m == j).map(|k| self.mis_location[k])
    }

    pub fn missing_at(&self, location: MissingLocation) -> Vec<usize> {
        self.mis_idx
            .iter()
            .zip(&self.mis_location)
            .filter(|(_, l)| **l == location)
            .map(|(j, _)| *j)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.mis_idx.is_empty()
    }

    /// Covariates observed in `stratum` (observed-in-both plus the partially missing ones).
    pub fn observed_in(&self, stratum: Stratum) -> Vec<usize> {
        let mut cols: Vec<usize> = (0..self.p)
            .filter(|&j| match self.location_of(j) {
                None => true,
                Some(MissingLocation::TotallyMissing) => false,
                Some(MissingLocation::MissingInTrial) => stratum == Stratum::Observational,
                Some(MissingLocation::MissingInObservational) => stratum == Stratum::Trial,
            })
            .collect();
        cols.sort_unstable();
        cols
    }
}

/// Classifies every covariate from the per-stratum missingness masks.
pub fn detect_pattern(sample: &CombinedSample) -> CovariatePattern {
    let missing: Vec<(usize, MissingLocation)> = (0..sample.p())
        .filter_map(|j| {
            let in_trial = sample.observed_in(j, Stratum::Trial);
            let in_obs = sample.observed_in(j, Stratum::Observational);
            match (in_trial, in_obs) {
                (true, true) => None,
                (false, false) => Some((j, MissingLocation::TotallyMissing)),
                (false, true) => Some((j, MissingLocation::MissingInTrial)),
                (true, false) => Some((j, MissingLocation::MissingInObservational)),
            }
        })
        .collect();
    CovariatePattern::with_missing(sample.p(), &missing)
}

/// Rows used to estimate the shared covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSource {
    /// Within-stratum pooled estimate over both strata.
    Pooled,
    ObservationalOnly,
    TrialOnly,
}

impl CovSource {
    /// Observational rows when some covariate is missing in the trial, pooled otherwise.
    pub fn default_for(pattern: &CovariatePattern) -> CovSource {
        if pattern.missing_at(MissingLocation::MissingInTrial).is_empty() {
            CovSource::Pooled
        } else {
            CovSource::ObservationalOnly
        }
    }
}

/// Stratum means and the shared covariance matrix. Entries that cannot be
/// estimated under the pattern are `NaN`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentSummary {
    /// E[X], estimated on the observational rows.
    pub mean_target: Vec<f64>,
    /// E[X | S = 1].
    pub mean_trial: Vec<f64>,
    /// Row-major p × p.
    pub cov: Vec<Vec<f64>>,
    pub n: usize,
    pub m: usize,
    pub cov_source: CovSource,
    #[serde(default)]
    pub names: Vec<String>,
}

impl MomentSummary {
    pub fn p(&self) -> usize {
        self.mean_target.len()
    }

    pub fn name(&self, j: usize) -> String {
        self.names.get(j).cloned().unwrap_or_else(|| format!("X{}", j + 1))
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let p = self.p();
        DMatrix::from_fn(p, p, |i, j| self.cov[i][j])
    }

    /// E[X_j] − E[X_j | S = 1]; `NaN` when either side is unobserved.
    pub fn shift(&self, j: usize) -> f64 {
        self.mean_target[j] - self.mean_trial[j]
    }

    pub fn cov_block(&self, rows: &[usize], cols: &[usize]) -> Option<DMatrix<f64>> {
        let block = DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.cov[rows[r]][cols[c]]);
        (!block.iter().any(|v| v.is_nan())).then_some(block)
    }
}

fn column_mean(sample: &CombinedSample, rows: &[usize], j: usize) -> f64 {
    rows.iter().map(|&i| sample.covariates[(i, j)]).sum::<f64>() / rows.len() as f64
}

/// Sum of centred cross-products over `rows` for the columns in `cols`.
fn scatter(sample: &CombinedSample, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let means: Vec<f64> = cols.iter().map(|&j| column_mean(sample, rows, j)).collect();
    let k = cols.len();
    let mut s = DMatrix::zeros(k, k);
    for &i in rows {
        for a in 0..k {
            let da = sample.covariates[(i, cols[a])] - means[a];
            for b in a..k {
                s[(a, b)] += da * (sample.covariates[(i, cols[b])] - means[b]);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            s[(a, b)] = s[(b, a)];
        }
    }
    s
}

/// Stratum means plus the unbiased covariance estimate from `cov_source`.
///
/// The covariance covers every covariate that is not totally missing; each of
/// them must be observed in the `cov_source` rows.
pub fn estimate_moments(
    sample: &CombinedSample,
    pattern: &CovariatePattern,
    cov_source: CovSource,
) -> Result<MomentSummary> {
    let p = sample.p();
    let (n, m) = (sample.n(), sample.m());
    for (stratum, count) in [(Stratum::Trial, n), (Stratum::Observational, m)] {
        if count < 2 {
            return Err(Error::InsufficientRows {
                stratum: stratum.label().into(),
                rows: count,
            });
        }
    }
    let mean_in = |stratum: Stratum| -> Vec<f64> {
        (0..p)
            .map(|j| {
                if sample.observed_in(j, stratum) {
                    column_mean(sample, sample.stratum_rows(stratum), j)
                } else {
                    f64::NAN
                }
            })
            .collect()
    };
    let mean_target = mean_in(Stratum::Observational);
    let mean_trial = mean_in(Stratum::Trial);

    let block: Vec<usize> = (0..p)
        .filter(|&j| pattern.location_of(j) != Some(MissingLocation::TotallyMissing))
        .collect();
    let needs = |stratum: Stratum| -> Result<()> {
        match block.iter().find(|&&j| !sample.observed_in(j, stratum)) {
            Some(&j) => Err(Error::MissingBlock(sample.names()[j].clone())),
            None => Ok(()),
        }
    };
    let scatter_block = match cov_source {
        CovSource::TrialOnly => {
            needs(Stratum::Trial)?;
            scatter(sample, sample.trial_rows(), &block) / (n - 1) as f64
        }
        CovSource::ObservationalOnly => {
            needs(Stratum::Observational)?;
            scatter(sample, sample.obs_rows(), &block) / (m - 1) as f64
        }
        CovSource::Pooled => {
            needs(Stratum::Trial)?;
            needs(Stratum::Observational)?;
            (scatter(sample, sample.trial_rows(), &block) + scatter(sample, sample.obs_rows(), &block))
                / (n + m - 2) as f64
        }
    };
    let mut cov = vec![vec![f64::NAN; p]; p];
    for (a, &ja) in block.iter().enumerate() {
        for (b, &jb) in block.iter().enumerate() {
            cov[ja][jb] = scatter_block[(a, b)];
        }
    }
    Ok(MomentSummary {
        mean_target,
        mean_trial,
        cov,
        n,
        m,
        cov_source,
        names: sample.names().to_vec(),
    })
}

/// Column names of the CSV input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub study: String,
    pub treatment: Option<String>,
    pub outcome: Option<String>,
    /// `None` selects every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            study: "S".into(),
            treatment: Some("A".into()),
            outcome: Some("Y".into()),
            covariates: None,
        }
    }
}

fn is_absent(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == "NA"
}

fn parse_number(field: &str, line: usize, column: &str) -> Result<Option<f64>> {
    if is_absent(field) {
        return Ok(None);
    }
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::MalformedRow {
            line,
            column: column.to_string(),
            value: field.to_string(),
        }),
    }
}

fn parse_binary(field: &str, line: usize, column: &str) -> Result<Option<bool>> {
    match parse_number(field, line, column)? {
        None => Ok(None),
        Some(v) if v == 0.0 => Ok(Some(false)),
        Some(v) if v == 1.0 => Ok(Some(true)),
        Some(_) => Err(Error::MalformedRow {
            line,
            column: column.to_string(),
            value: field.to_string(),
        }),
    }
}

struct RawRows {
    names: Vec<String>,
    x: Vec<f64>,
    study: Vec<bool>,
    treatment: Vec<Option<bool>>,
    outcome: Vec<Option<f64>>,
    dropped_obs_outcomes: usize,
}

fn read_rows<R: Read>(reader: R, schema: &CsvSchema, acc: &mut Option<RawRows>) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let s_col = find(&schema.study)?;
    let a_col = schema.treatment.as_deref().and_then(|n| find(n).ok());
    let y_col = schema.outcome.as_deref().and_then(|n| find(n).ok());
    let cov_names: Vec<String> = match &schema.covariates {
        Some(list) => list.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != s_col && Some(*k) != a_col && Some(*k) != y_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if cov_names.is_empty() {
        return Err(Error::InvalidInput("no covariate columns".into()));
    }
    let cov_cols: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let raw = acc.get_or_insert_with(|| RawRows {
        names: cov_names.clone(),
        x: Vec::new(),
        study: Vec::new(),
        treatment: Vec::new(),
        outcome: Vec::new(),
        dropped_obs_outcomes: 0,
    });
    if raw.names != cov_names {
        return Err(Error::InvalidInput(format!(
            "covariate columns differ between input files: {:?} vs {:?}",
            raw.names, cov_names
        )));
    }
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = k + 2;
        let field = |c: usize| record.get(c).unwrap_or("");
        let s = parse_binary(field(s_col), line, &schema.study)?.ok_or_else(|| Error::MalformedRow {
            line,
            column: schema.study.clone(),
            value: field(s_col).to_string(),
        })?;
        if s {
            for (col, name) in [(a_col, &schema.treatment), (y_col, &schema.outcome)] {
                if let (None, Some(name)) = (col, name) {
                    return Err(Error::MissingColumn(name.clone()));
                }
            }
        }
        let mut a = match (a_col, &schema.treatment) {
            (Some(c), Some(name)) => parse_binary(field(c), line, name)?,
            _ => None,
        };
        let mut y = match (y_col, &schema.outcome) {
            (Some(c), Some(name)) => parse_number(field(c), line, name)?,
            _ => None,
        };
        if !s && (a.is_some() || y.is_some()) {
            raw.dropped_obs_outcomes += 1;
            a = None;
            y = None;
        }
        for (&c, name) in cov_cols.iter().zip(&cov_names) {
            raw.x.push(parse_number(field(c), line, name)?.unwrap_or(f64::NAN));
        }
        raw.study.push(s);
        raw.treatment.push(a);
        raw.outcome.push(y);
    }
    Ok(())
}

fn finish(raw: Option<RawRows>) -> Result<CombinedSample> {
    let raw = raw.ok_or_else(|| Error::InvalidInput("no input".into()))?;
    let p = raw.names.len();
    let rows = raw.study.len();
    if !raw.study.iter().any(|&s| s) {
        return Err(Error::EmptyStratum(Stratum::Trial.label().into()));
    }
    if !raw.study.iter().any(|&s| !s) {
        return Err(Error::EmptyStratum(Stratum::Observational.label().into()));
    }
    let x = DMatrix::from_row_slice(rows, p, &raw.x);
    let mut sample = CombinedSample::new(raw.names, x, raw.study, raw.treatment, raw.outcome)?;
    if raw.dropped_obs_outcomes > 0 {
        sample.push_note(format!(
            "ignored treatment/outcome values on {} observational rows",
            raw.dropped_obs_outcomes
        ));
    }
    Ok(sample)
}

/// Parses one CSV stream into a validated sample.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<CombinedSample> {
    let mut acc = None;
    read_rows(reader, schema, &mut acc)?;
    finish(acc)
}

/// Loads a combined CSV file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CombinedSample> {
    read_csv(File::open(path)?, schema)
}

/// Loads and concatenates several CSV files sharing the same covariate columns
/// (e.g. a trial file and an observational file).
pub fn load_csv_files<P: AsRef<Path>>(paths: &[P], schema: &CsvSchema) -> Result<CombinedSample> {
    let mut acc = None;
    for path in paths {
        read_rows(File::open(path)?, schema, &mut acc)?;
    }
    finish(acc)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the sample as `S,A,Y,<covariates>` with 17 significant digits and `NA` for absent cells.
pub fn write_csv<W: Write>(sample: &CombinedSample, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["S".to_string(), "A".to_string(), "Y".to_string()];
    header.extend(sample.names().iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..sample.rows() {
        let mut rec = Vec::with_capacity(3 + sample.p());
        rec.push(if sample.is_trial(i) { "1".to_string() } else { "0".to_string() });
        rec.push(match sample.treatment(i) {
            Some(true) => "1".into(),
            Some(false) => "0".into(),
            None => "NA".into(),
        });
        rec.push(sample.outcome(i).map(fmt17).unwrap_or_else(|| "NA".into()));
        for j in 0..sample.p() {
            rec.push(sample.covariate(i, j).map(fmt17).unwrap_or_else(|| "NA".into()));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Sample mean of the given values.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let mu = mean(values);
    values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}
