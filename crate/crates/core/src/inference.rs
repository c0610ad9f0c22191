//! Perturbation resampling.
//!
//! Each resample draws iid positive weights `G_i` with unit mean and variance, and
//! reruns every layer of the pipeline under them: the ridge initial fit, the adaptive
//! LASSO fit at the original penalty level, the refit, the kernel sums and the
//! normalized IPW means. The spread of the perturbed estimates gives the standard
//! error (scaled MAD) and a percentile interval.

use rand::Rng;
use rand_distr::{Exp1, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_from_fits, fit_models, prepare, EffectEstimate, EstimatorConfig, FittedModels, Method};
use crate::rng::{stream, PURPOSE_PERTURB};
use crate::stats::{mad, normal_cdf, quantile_type7, sample_sd};

/// Largest tolerated share of failed resamples.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightLaw {
    /// Exponential with rate one.
    Exponential,
    /// Log-normal scaled to unit mean and unit variance.
    LogNormal,
}

impl std::str::FromStr for WeightLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(WeightLaw::Exponential),
            "log-normal" | "lognormal" => Ok(WeightLaw::LogNormal),
            other => Err(Error::Config(format!("unknown weight law '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub resamples: usize,
    pub law: WeightLaw,
    pub seed: u64,
    /// Keep the tuned penalty levels instead of re-tuning inside each resample.
    pub reuse_lambda: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            resamples: 500,
            law: WeightLaw::Exponential,
            seed: 0,
            reuse_lambda: true,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resamples < 2 {
            return Err(Error::Config(format!("need at least 2 resamples, got {}", self.resamples)));
        }
        Ok(())
    }
}

/// Weights for resample `index`, from a stream private to `(seed, index)`.
pub fn draw_weights(n: usize, law: WeightLaw, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = stream(seed, PURPOSE_PERTURB, index);
    match law {
        WeightLaw::Exponential => (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
        WeightLaw::LogNormal => {
            let dist = LogNormal::from_mean_cv(1.0, 1.0).expect("valid log-normal parameters");
            (0..n).map(|_| rng.sample(dist)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleSummary {
    pub delta_hat: f64,
    pub resamples: Vec<f64>,
    pub se_mad: f64,
    pub se_sd: f64,
    pub ci: (f64, f64),
    /// Two-sided Wald p-value; `None` when the resamples have no spread.
    pub p_wald: Option<f64>,
    pub failures: usize,
}

/// Scaled MAD, sample SD, type-7 2.5%/97.5% percentiles and the Wald p-value.
pub fn summarize(delta_hat: f64, resamples: &[f64]) -> Result<ResampleSummary> {
    if resamples.len() < 2 {
        return Err(Error::Inference(format!(
            "only {} successful resamples; at least 2 are needed",
            resamples.len()
        )));
    }
    let mut sorted = resamples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let se_mad = mad(resamples);
    let p_wald = (se_mad > 0.0).then(|| 2.0 * (1.0 - normal_cdf(delta_hat.abs() / se_mad)));
    Ok(ResampleSummary {
        delta_hat,
        resamples: resamples.to_vec(),
        se_mad,
        se_sd: sample_sd(resamples),
        ci: (quantile_type7(&sorted, 0.025), quantile_type7(&sorted, 0.975)),
        p_wald,
        failures: 0,
    })
}

fn arm_mass_ok(d: &Dataset, g: &[f64]) -> bool {
    let mut mass = [0.0; 2];
    for (&a, &w) in d.t().iter().zip(g) {
        mass[a as usize] += w;
    }
    let total = mass[0] + mass[1];
    mass.iter().all(|&m| m > 1e-12 * total)
}

/// One perturbed pipeline run on prepared data; `fits` supplies the tuned penalty
/// levels. Returns one `Δ*` (or failure) per method.
pub fn perturb_once(
    d: &Dataset,
    fits: &FittedModels,
    methods: &[Method],
    cfg: &EstimatorConfig,
    reuse_lambda: bool,
    g: &[f64],
) -> Vec<Result<f64>> {
    let fail_all = |e: Error| methods.iter().map(|_| Err(Error::Estimation(e.to_string()))).collect();
    if g.len() != d.n() {
        return fail_all(Error::Inference(format!("{} weights for {} rows", g.len(), d.n())));
    }
    if !arm_mass_ok(d, g) {
        return fail_all(Error::Inference("weighted arm mass is zero".into()));
    }
    let lambdas = reuse_lambda.then(|| fits.lambdas());
    match fit_models(d, cfg, lambdas, Some(g)) {
        Ok(pf) => estimate_from_fits(d, &pf, methods, cfg, Some(g))
            .into_iter()
            .map(|r| r.map(|e| e.delta))
            .collect(),
        Err(e) => fail_all(e),
    }
}

/// Perturbed estimates for each method, in method order. Failed resamples are
/// dropped and counted.
pub fn resample(
    d: &Dataset,
    fits: &FittedModels,
    methods: &[Method],
    cfg: &EstimatorConfig,
    pcfg: &PerturbationConfig,
) -> Result<Vec<(Vec<f64>, usize)>> {
    pcfg.validate()?;
    let runs: Vec<Vec<Result<f64>>> = (0..pcfg.resamples)
        .into_par_iter()
        .map(|b| {
            let g = draw_weights(d.n(), pcfg.law, pcfg.seed, b as u64);
            perturb_once(d, fits, methods, cfg, pcfg.reuse_lambda, &g)
        })
        .collect();
    let mut out = vec![(Vec::with_capacity(pcfg.resamples), 0usize); methods.len()];
    for run in runs {
        for (slot, r) in out.iter_mut().zip(run) {
            match r {
                Ok(v) if v.is_finite() => slot.0.push(v),
                _ => slot.1 += 1,
            }
        }
    }
    Ok(out)
}

/// Adds perturbation standard errors, percentile intervals and p-values to estimates
/// computed from `fits` on prepared data `d`.
///
/// A method whose failure share exceeds 5% is reported as an inference error.
pub fn attach_inference(
    d: &Dataset,
    fits: &FittedModels,
    estimates: Vec<Result<EffectEstimate>>,
    cfg: &EstimatorConfig,
    pcfg: &PerturbationConfig,
) -> Result<Vec<Result<(EffectEstimate, ResampleSummary)>>> {
    let methods: Vec<Method> = estimates.iter().flatten().map(|e| e.method).collect();
    let mut draws = resample(d, fits, &methods, cfg, pcfg)?.into_iter();
    Ok(estimates
        .into_iter()
        .map(|r| {
            let mut est = r?;
            let (vals, failures) = draws.next().expect("one draw set per successful estimate");
            if failures as f64 > MAX_FAILURE_SHARE * pcfg.resamples as f64 {
                return Err(Error::Inference(format!(
                    "{failures} of {} resamples failed for {}",
                    pcfg.resamples, est.method
                )));
            }
            let mut summary = summarize(est.delta, &vals)?;
            summary.failures = failures;
            est.se = Some(summary.se_mad);
            est.ci = Some(summary.ci);
            est.p_value = summary.p_wald;
            est.diagnostics.resample_failures = failures;
            Ok((est, summary))
        })
        .collect())
}

/// End-to-end estimation with perturbation inference on a raw dataset.
pub fn estimate_with_inference(
    d: &Dataset,
    methods: &[Method],
    cfg: &EstimatorConfig,
    pcfg: &PerturbationConfig,
) -> Result<Vec<Result<(EffectEstimate, ResampleSummary)>>> {
    pcfg.validate()?;
    let (prepared, _) = prepare(d, cfg)?;
    let fits = fit_models(&prepared, cfg, None, None)?;
    let estimates = estimate_from_fits(&prepared, &fits, methods, cfg, None);
    attach_inference(&prepared, &fits, estimates, cfg, pcfg)
}
