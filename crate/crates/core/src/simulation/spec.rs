use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::CombinedSample;
use crate::error::{Error, Result};
use crate::stats::{expit, logit};
use crate::stream_rng;

/// Stream reserved for intercept calibration probes.
pub const CALIBRATION_STREAM: u64 = u64::MAX - 1;
pub const CALIBRATION_PROBES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GForm {
    #[default]
    Linear,
    /// g(x) = 5 sin(x1) + x2² + Σ_{j≥3} β_j x_j
    NonLinearDemo,
}

/// Generative description of a synthetic trial + observational experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub name: String,
    pub p: usize,
    pub mean: Vec<f64>,
    /// Target-population covariance (row-major).
    pub cov: Vec<Vec<f64>>,
    /// Covariance of the pool the trial is selected from; `None` = `cov`.
    pub trial_cov: Option<Vec<Vec<f64>>>,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta_s: Vec<f64>,
    /// Selection intercept; `None` = calibrated to `selection_fraction`.
    pub beta_s0: Option<f64>,
    pub selection_fraction: f64,
    pub e1: f64,
    /// Pool size the trial is selected from.
    pub target_size: usize,
    pub obs_size: usize,
    pub noise_sd: f64,
    pub reps: usize,
    pub seed: u64,
    /// Index of the first replicate (replicate r uses RNG stream r).
    pub first_replicate: u64,
    pub g_form: GForm,
    /// Use the non-selected pool rows as the observational sample instead of a fresh draw.
    pub reuse_pool: bool,
}

pub fn identity_with(p: usize, entries: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; p]; p];
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(i, j, v) in entries {
        c[i][j] = v;
        c[j][i] = v;
    }
    c
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec::baseline()
    }
}

impl ScenarioSpec {
    /// Five N(1, 1) covariates with cov(X1, X5) = 0.8, n ≈ 2800 of 10⁴, m = 10⁴, τ = 50.
    pub fn baseline() -> Self {
        ScenarioSpec {
            name: "baseline".into(),
            p: 5,
            mean: vec![1.0; 5],
            cov: identity_with(5, &[(0, 4, 0.8)]),
            trial_cov: None,
            beta0: 0.0,
            beta: vec![5.0; 5],
            delta: vec![30.0, 30.0, -10.0, 0.0, 0.0],
            beta_s: vec![-0.4, 0.0, -0.3, -0.3, 0.0],
            beta_s0: None,
            selection_fraction: 0.28,
            e1: 0.5,
            target_size: 10_000,
            obs_size: 10_000,
            noise_sd: 1.0,
            reps: 100,
            seed: 1,
            first_replicate: 0,
            g_form: GForm::Linear,
            reuse_pool: false,
        }
    }

    pub fn names(&self) -> Vec<String> {
        (1..=self.p).map(|j| format!("X{j}")).collect()
    }

    /// ⟨δ, E[X]⟩.
    pub fn true_ate(&self) -> f64 {
        self.delta.iter().zip(&self.mean).map(|(d, m)| d * m).sum()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| self.cov[i][j])
    }

    pub fn trial_cov_matrix(&self) -> DMatrix<f64> {
        match &self.trial_cov {
            Some(c) => DMatrix::from_fn(self.p, self.p, |i, j| c[i][j]),
            None => self.cov_matrix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let p = self.p;
        if p == 0 {
            return bad("p must be positive".into());
        }
        for (name, len) in [
            ("mean", self.mean.len()),
            ("beta", self.beta.len()),
            ("delta", self.delta.len()),
            ("beta_s", self.beta_s.len()),
        ] {
            if len != p {
                return bad(format!("{name} has length {len}, expected {p}"));
            }
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if !(self.e1 > 0.0 && self.e1 < 1.0) {
            return bad(format!("e1 must lie in (0, 1), got {}", self.e1));
        }
        if self.beta_s0.is_none() && !(self.selection_fraction > 0.0 && self.selection_fraction < 1.0) {
            return bad("selection_fraction must lie in (0, 1)".into());
        }
        if self.target_size == 0 || (self.obs_size == 0 && !self.reuse_pool) {
            return bad("sample sizes must be positive".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        if self.g_form == GForm::NonLinearDemo && p < 2 {
            return bad("the non-linear demo outcome needs at least two covariates".into());
        }
        for (label, c) in [("cov", Some(&self.cov)), ("trial_cov", self.trial_cov.as_ref())] {
            let Some(c) = c else { continue };
            if c.len() != p || c.iter().any(|r| r.len() != p) {
                return bad(format!("{label} must be {p}x{p}"));
            }
            let m = DMatrix::from_fn(p, p, |i, j| c[i][j]);
            if (&m - m.transpose()).amax() > 1e-12 {
                return bad(format!("{label} is not symmetric"));
            }
            if m.cholesky().is_none() {
                return bad(format!("{label} is not positive definite"));
            }
        }
        Ok(())
    }

    /// Copy with the selection intercept calibrated when it is not fixed.
    pub fn resolved(&self) -> Result<ScenarioSpec> {
        self.validate()?;
        let mut out = self.clone();
        if out.beta_s0.is_none() {
            let mut rng = stream_rng(self.seed, CALIBRATION_STREAM);
            out.beta_s0 = Some(calibrate_intercept(self, self.selection_fraction, &mut rng)?);
        }
        Ok(out)
    }

    fn outcome_base(&self, x: &[f64]) -> f64 {
        let lin = |from: usize| -> f64 { (from..self.p).map(|j| self.beta[j] * x[j]).sum() };
        self.beta0
            + match self.g_form {
                GForm::Linear => lin(0),
                GForm::NonLinearDemo => 5.0 * x[0].sin() + x[1] * x[1] + lin(2),
            }
    }
}

fn draw_gaussian(mean: &[f64], chol: &DMatrix<f64>, rows: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let p = mean.len();
    let mut x = DMatrix::zeros(rows, p);
    let mut z = DVector::zeros(p);
    for i in 0..rows {
        for k in 0..p {
            z[k] = rng.sample(StandardNormal);
        }
        let v = chol * &z;
        for j in 0..p {
            x[(i, j)] = mean[j] + v[j];
        }
    }
    x
}

fn lower_cholesky(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))
}

/// Selection intercept giving an expected trial fraction of `desired_fraction`,
/// found by bisection over 10⁵ probe draws from the trial pool distribution.
pub fn calibrate_intercept(spec: &ScenarioSpec, desired_fraction: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(desired_fraction > 0.0 && desired_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "desired fraction must lie in (0, 1), got {desired_fraction}"
        )));
    }
    if spec.beta_s.iter().all(|&b| b == 0.0) {
        return Ok(logit(desired_fraction));
    }
    let chol = lower_cholesky(spec.trial_cov_matrix())?;
    let x = draw_gaussian(&spec.mean, &chol, CALIBRATION_PROBES, rng);
    let lin: Vec<f64> = (0..x.nrows())
        .map(|i| (0..spec.p).map(|j| spec.beta_s[j] * x[(i, j)]).sum())
        .collect();
    let frac = |b: f64| lin.iter().map(|l| expit(b + l)).sum::<f64>() / lin.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < desired_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Oracle outputs alongside the generated sample.
#[derive(Debug, Clone)]
pub struct Generated {
    pub sample: CombinedSample,
    /// Potential-outcome CATE ⟨δ, x⟩ averaged over the observational rows.
    pub sample_ate: f64,
}

/// Draws one replicate: pool → Bernoulli selection → randomised treatment →
/// outcomes; the observational sample is a fresh draw from the target law.
pub fn generate(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<CombinedSample> {
    generate_with_oracle(spec, rng).map(|g| g.sample)
}

pub fn generate_with_oracle(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Generated> {
    spec.validate()?;
    let b0 = match spec.beta_s0 {
        Some(b) => b,
        None => calibrate_intercept(spec, spec.selection_fraction, rng)?,
    };
    let p = spec.p;
    let trial_chol = lower_cholesky(spec.trial_cov_matrix())?;
    let pool = draw_gaussian(&spec.mean, &trial_chol, spec.target_size, rng);
    let mut selected = Vec::new();
    let mut rest = Vec::new();
    for i in 0..pool.nrows() {
        let eta = b0 + (0..p).map(|j| spec.beta_s[j] * pool[(i, j)]).sum::<f64>();
        if rng.random_bool(expit(eta)) {
            selected.push(i);
        } else {
            rest.push(i);
        }
    }
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let trial_x = pool.select_rows(&selected);
    let mut a = Vec::with_capacity(selected.len());
    let mut y = Vec::with_capacity(selected.len());
    for i in 0..trial_x.nrows() {
        let x: Vec<f64> = trial_x.row(i).iter().copied().collect();
        let treated = rng.random_bool(spec.e1);
        let eps: f64 = rng.sample(StandardNormal);
        let cate: f64 = spec.delta.iter().zip(&x).map(|(d, v)| d * v).sum();
        y.push(spec.outcome_base(&x) + if treated { cate } else { 0.0 } + spec.noise_sd * eps);
        a.push(treated);
    }
    let obs_x = if spec.reuse_pool {
        pool.select_rows(&rest)
    } else {
        let chol = lower_cholesky(spec.cov_matrix())?;
        draw_gaussian(&spec.mean, &chol, spec.obs_size, rng)
    };
    let sample_ate = (0..obs_x.nrows())
        .map(|i| (0..p).map(|j| spec.delta[j] * obs_x[(i, j)]).sum::<f64>())
        .sum::<f64>()
        / obs_x.nrows().max(1) as f64;
    let sample = CombinedSample::from_strata(spec.names(), &trial_x, &a, &y, &obs_x)?;
    Ok(Generated { sample, sample_ate })
}
