//! Target-population average treatment effects from a randomized trial plus
//! an observational covariate sample, with closed-form sensitivity analysis
//! for missing key covariates and a Monte Carlo harness.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod sensitivity;
pub mod simulation;
pub mod stats;

pub use data::{
    detect_pattern, estimate_moments, load_csv, load_csv_files, read_csv, write_csv, CombinedSample,
    CovSource, CovariatePattern, CsvSchema, MissingLocation, MomentSummary, Stratum,
};
pub use error::{Error, ErrorClass, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG stream `index` under `seed`; independent of scheduling.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
