use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::cholesky;
use crate::error::{Error, Result};

pub const PROB_CLIP: f64 = 1e-12;
const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after each accepted step (first entry at the start value).
    pub loglik_trace: Vec<f64>,
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl LogisticFit {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// P(s = 1 | x), clipped to `[1e-12, 1 − 1e-12]`.
    pub fn probability(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x)).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.probability(&row)
            })
            .collect()
    }

    /// Odds p / (1 − p) from the clipped probability.
    pub fn odds(&self, x: &[f64]) -> f64 {
        let p = self.probability(x);
        p / (1.0 - p)
    }

    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

fn loglik(design: &DMatrix<f64>, s: &[bool], beta: &DVector<f64>) -> f64 {
    let eta = design * beta;
    eta.iter()
        .zip(s)
        .map(|(&e, &si)| if si { e } else { 0.0 } - softplus(e))
        .sum()
}

/// Maximum-likelihood logistic regression by IRLS with step halving.
///
/// Separation is not an error: the fit stops with `converged = false` and a
/// large coefficient norm.
pub fn fit_logistic(x: &DMatrix<f64>, s: &[bool]) -> Result<LogisticFit> {
    let (n, q) = (x.nrows(), x.ncols());
    if s.len() != n {
        return Err(Error::InvalidInput("label length differs from design rows".into()));
    }
    let ones = s.iter().filter(|&&v| v).count();
    if ones == 0 || ones == n {
        return Err(Error::InvalidInput("logistic regression needs both classes".into()));
    }
    let mut design = DMatrix::from_element(n, q + 1, 1.0);
    design.columns_mut(1, q).copy_from(x);
    let frac = ones as f64 / n as f64;
    let mut beta = DVector::zeros(q + 1);
    beta[0] = logit(frac);
    let mut ll = loglik(&design, s, &beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    // mean score per row below SCORE_TOL
    let score_tol = SCORE_TOL * n as f64;
    while iterations < MAX_ITER {
        let eta = &design * &beta;
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_fn(n, |i, _| if s[i] { 1.0 } else { 0.0 } - p[i]);
        let score = design.tr_mul(&resid);
        if score.amax() < score_tol {
            converged = true;
            break;
        }
        let mut weighted = design.clone();
        for i in 0..n {
            let w = p[i] * (1.0 - p[i]);
            weighted.row_mut(i).scale_mut(w);
        }
        let info = design.tr_mul(&weighted);
        let Ok(ch) = cholesky(&info, 1e-14) else { break };
        let step = ch.solve(&score);
        iterations += 1;
        // Newton decrement: remaining log-likelihood gain is below rounding
        if step.dot(&score) < 1e-12 * (ll.abs() + 1.0) {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_ll = loglik(&design, s, &cand);
            if cand_ll >= ll {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // at machine precision: no ascent direction left
            converged = score.amax() < 1e3 * score_tol;
            break;
        }
        trace.push(ll);
    }
    // complete separation: every row fitted to its label, score vanishing only as ‖β‖ → ∞
    let eta = &design * &beta;
    let separated = eta
        .iter()
        .zip(s)
        .all(|(&e, &si)| if si { e > 15.0 } else { e < -15.0 });
    if separated {
        converged = false;
    }
    Ok(LogisticFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        converged,
        iterations,
        loglik_trace: trace,
    })
}
