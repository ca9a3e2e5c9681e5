//! Nadaraya–Watson regression with a product Gaussian kernel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Per-dimension Silverman rule of thumb: `σ_j (4 / ((d + 2) n))^{1/(d+4)}`.
pub fn silverman_bandwidths(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, d) = (x.nrows() as f64, x.ncols() as f64);
    let factor = (4.0 / ((d + 2.0) * n)).powf(1.0 / (d + 4.0));
    (0..x.ncols())
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let sd = if col.len() > 1 { crate::data::variance(&col).sqrt() } else { 0.0 };
            if sd > 0.0 {
                sd * factor
            } else {
                1.0
            }
        })
        .collect()
}

/// Kernel estimate at each query row. With `leave_one_out`, query row `i`
/// is taken to be training row `i` and is excluded from its own estimate.
/// A query whose kernel weights all underflow receives the global mean.
pub fn kernel_regress(
    x: &DMatrix<f64>,
    y: &[f64],
    bandwidths: &[f64],
    query: &DMatrix<f64>,
    leave_one_out: bool,
) -> Vec<f64> {
    assert_eq!(x.nrows(), y.len());
    assert_eq!(x.ncols(), bandwidths.len());
    assert!(bandwidths.iter().all(|&h| h > 0.0), "bandwidth must be positive");
    if leave_one_out {
        assert_eq!(query.nrows(), x.nrows(), "leave-one-out needs query = training rows");
    }
    let global = crate::data::mean(y);
    let (n, d) = (x.nrows(), x.ncols());
    let inv_h: Vec<f64> = bandwidths.iter().map(|h| 1.0 / h).collect();
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| x[(i, j)] * inv_h[j]).collect())
        .collect();
    (0..query.nrows())
        .map(|q| {
            let qs: Vec<f64> = (0..d).map(|j| query[(q, j)] * inv_h[j]).collect();
            let (mut num, mut den) = (0.0, 0.0);
            for (i, xi) in xs.iter().enumerate() {
                if leave_one_out && i == q {
                    continue;
                }
                let dist2: f64 = xi.iter().zip(&qs).map(|(a, b)| (a - b) * (a - b)).sum();
                let w = (-0.5 * dist2).exp();
                num += w * y[i];
                den += w;
            }
            if den > 0.0 && den.is_finite() {
                num / den
            } else {
                global
            }
        })
        .collect()
}

/// Stored training data for out-of-sample kernel predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelFit {
    pub bandwidths: Vec<f64>,
    #[serde(skip)]
    x: DMatrix<f64>,
    #[serde(skip)]
    y: Vec<f64>,
}

impl KernelFit {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, bandwidths: Vec<f64>) -> Self {
        KernelFit { bandwidths, x, y }
    }

    pub fn predict(&self, query: &DMatrix<f64>) -> Vec<f64> {
        kernel_regress(&self.x, &self.y, &self.bandwidths, query, false)
    }

    /// Leave-one-out fitted values on the training rows.
    pub fn fitted_loo(&self) -> Vec<f64> {
        kernel_regress(&self.x, &self.y, &self.bandwidths, &self.x, true)
    }
}
