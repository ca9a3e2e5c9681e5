//! Synthetic data generation and Monte Carlo scenario runners.

pub mod runner;
pub mod scenarios;
pub mod spec;
pub mod subsample;

pub use runner::{
    oracle_bias, run_replicates, run_scenario, summarize, Handling, PatternSpec, ReplicateRow, RunOptions,
    ScenarioResult, SummaryRow,
};
pub use scenarios::{
    correlation_sweep, standard_patterns, heterogeneity_situations, heterogeneity_spec, imputation, dropped_covariates,
    hypothesized_means, proxy_spec, proxy_sweep, run_named, sweep_selection_strength, Situation, NAMED_SCENARIOS,
};
pub use spec::{calibrate_intercept, generate, generate_with_oracle, identity_with, GForm, Generated, ScenarioSpec};
pub use subsample::{biased_subsample, BiasedSplit, SelectionLogit};
