use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{detect_pattern, CombinedSample};
use crate::error::{Error, Result};
use crate::stats::expit;

/// Trial subsample plus holdout, with row indices into the source sample.
#[derive(Debug, Clone)]
pub struct BiasedSplit {
    /// Selected rows as the trial stratum, holdout rows as the observational stratum.
    pub sample: CombinedSample,
    pub trial_source_rows: Vec<usize>,
    pub holdout_source_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionLogit {
    pub intercept: f64,
    pub slope: f64,
}

/// Splits the trial rows of `rct` into a random holdout (`holdout_fraction`
/// of rows, outcomes discarded) and a trial subsample selected from the rest
/// with probability expit(intercept + slope · x) on `selection_covariate`.
pub fn biased_subsample(
    rct: &CombinedSample,
    selection_covariate: &str,
    logit: SelectionLogit,
    holdout_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BiasedSplit> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    if !detect_pattern(rct).is_complete() {
        return Err(Error::PatternMismatch("biased subsampling needs a fully observed trial".into()));
    }
    let j = rct
        .index_of(selection_covariate)
        .ok_or_else(|| Error::MissingColumn(selection_covariate.into()))?;
    let mut rows = rct.trial_rows().to_vec();
    rows.shuffle(rng);
    let holdout_n = ((rows.len() as f64) * holdout_fraction).round() as usize;
    if holdout_n == 0 || holdout_n == rows.len() {
        return Err(Error::InvalidInput("trial too small for the requested holdout".into()));
    }
    let mut holdout: Vec<usize> = rows[..holdout_n].to_vec();
    let candidates = &rows[holdout_n..];
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| {
            let x = rct.covariate_matrix()[(i, j)];
            rng.random_bool(expit(logit.intercept + logit.slope * x))
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    selected.sort_unstable();
    holdout.sort_unstable();
    let trial_x = rct.design(&selected, &(0..rct.p()).collect::<Vec<_>>());
    let obs_x = rct.design(&holdout, &(0..rct.p()).collect::<Vec<_>>());
    let a: Vec<bool> = selected.iter().map(|&i| rct.treatment(i).unwrap_or(false)).collect();
    let y: Vec<f64> = rct.outcomes(&selected);
    let sample = CombinedSample::from_strata(rct.names().to_vec(), &trial_x, &a, &y, &obs_x)?;
    Ok(BiasedSplit {
        sample,
        trial_source_rows: selected,
        holdout_source_rows: holdout,
    })
}
