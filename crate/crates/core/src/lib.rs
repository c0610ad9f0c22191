//! Double-index propensity score (DiPS) estimation of average treatment effects.
//!
//! The pipeline fits a penalized propensity model and a penalized outcome model,
//! smooths the treatment indicator over their two linear predictors with a
//! fourth-order Gaussian product kernel, and plugs the calibrated propensity scores
//! into a normalized inverse-probability-weighted mean. Perturbation resampling gives
//! standard errors and percentile intervals; [`sim`] reproduces the benchmark
//! simulation scenarios.

pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod inference;
pub mod rng;
pub mod sim;
pub mod smoother;
pub mod stats;

pub use data::{Covariates, Dataset, Standardization};
pub use error::{Error, ErrorKind, Result};
pub use glm::{Criterion, Family, GlmFit, GlmOptions, ModelSpec, Response};
pub use estimators::{
    estimate, estimate_dips, estimate_dr_alas, estimate_ipw_alas, estimate_many, Diagnostics, EffectEstimate,
    EstimatorConfig, FittedModels, Method,
};
pub use smoother::{build_dips, dips_pi, DipsModel, PropensityEstimates};
pub use inference::{estimate_with_inference, PerturbationConfig, ResampleSummary, WeightLaw};
pub use sim::{run_experiment, Scenario, ScenarioConfig, SimReport};
