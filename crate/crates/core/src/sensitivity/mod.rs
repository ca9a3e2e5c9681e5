//! Closed-form omitted-covariate bias, the Robinson learner and the
//! sensitivity procedures built on them.

pub mod bias;
pub mod grid;
pub mod procedures;
pub mod robinson;

pub use bias::{theoretical_bias, BiasReport, ParameterSource, SIGN_CONVENTION};
pub use grid::{linspace, render_grid, GridFormat, Marker, SensitivityGrid};
pub use procedures::{
    data_driven_delta, default_threshold, estimate_sigma, linear_cate_ate, linear_impute, partial_r2,
    procedure_missing_in_obs, procedure_missing_in_rct, procedure_proxy, procedure_totally_missing, proxy_bias,
    proxy_bias_estimated, with_marker, DeltaEstimate, ProxyReport,
};
pub use robinson::{robinson_rlearner, RobinsonFit};
