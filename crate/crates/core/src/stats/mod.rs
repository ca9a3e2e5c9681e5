//! Regression, Gaussian conditioning, kernel smoothing and Box's M.

pub mod boxm;
pub mod gaussian;
pub mod kernel;
pub mod linalg;
pub mod logistic;
pub mod ols;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use boxm::{box_m_between_strata, box_m_test, BoxMResult};
pub use gaussian::{conditional_gaussian, ConditionalGaussian};
pub use kernel::{kernel_regress, silverman_bandwidths, KernelFit};
pub use logistic::{expit, fit_logistic, logit, LogisticFit};
pub use ols::{fit_ols, LinearFit};

/// A fitted nuisance regression.
#[derive(Debug, Clone)]
pub enum NuisanceFit {
    Linear(LinearFit),
    Logistic(LogisticFit),
    Kernel(KernelFit),
}

impl NuisanceFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match self {
            NuisanceFit::Linear(f) => f.predict(x),
            NuisanceFit::Logistic(f) => f.predict(x),
            NuisanceFit::Kernel(f) => f.predict(x),
        }
    }
}

/// Outcome-surface regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    #[default]
    Linear,
    /// Deliberately mis-specified: arm mean only.
    InterceptOnly,
}

/// Selection-odds regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionModel {
    #[default]
    Logistic,
    /// Deliberately mis-specified: constant odds n/m.
    Constant,
}

/// Robinson stage-1 regressor for E[Y | X].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1 {
    #[default]
    Kernel,
    Linear,
}
