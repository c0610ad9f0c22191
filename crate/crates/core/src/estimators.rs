//! Average-treatment-effect estimators built from the fitted working models.
//!
//! * `dips`: normalized IPW with the double-index smoothed propensity scores;
//! * `ipw-alas`: normalized IPW with the parametric adaptive-LASSO propensity model;
//! * `dr-alas`: augmented IPW combining the parametric propensity and outcome models.
//!
//! All three share one pair of working-model fits. Every routine accepts optional
//! observation weights so that perturbation resampling reuses the same code path; with
//! weights absent (or all ones) the arithmetic is identical.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{standardize, Arm, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::glm::{fit_working_model, Family, GlmFit, GlmOptions, ModelSpec};
use crate::smoother::{build_dips, DipsModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dips,
    IpwAlas,
    DrAlas,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dips, Method::IpwAlas, Method::DrAlas];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dips => "dips",
            Method::IpwAlas => "ipw-alas",
            Method::DrAlas => "dr-alas",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dips" => Ok(Method::Dips),
            "ipw-alas" | "ipw" => Ok(Method::IpwAlas),
            "dr-alas" | "dr" | "aipw" => Ok(Method::DrAlas),
            other => Err(Error::Config(format!("unknown method '{other}' (expected dips, ipw-alas or dr-alas)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub glm: GlmOptions,
    /// Family of the outcome working model; the propensity model is always logistic.
    pub outcome_family: Family,
    pub arm_specific_slopes: bool,
    /// Standardize covariates before penalization.
    pub standardize: bool,
    /// Clip every propensity estimate into `[ε, 1 − ε]`.
    pub trim_ps: Option<f64>,
    /// Fixed smoothing bandwidth instead of the plug-in value.
    pub bandwidth: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            glm: GlmOptions::default(),
            outcome_family: Family::Gaussian,
            arm_specific_slopes: false,
            standardize: true,
            trim_ps: None,
            bandwidth: None,
        }
    }
}

impl EstimatorConfig {
    pub fn ps_spec(&self) -> ModelSpec {
        ModelSpec::propensity()
    }

    pub fn om_spec(&self) -> ModelSpec {
        ModelSpec::outcome(self.outcome_family).with_arm_specific_slopes(self.arm_specific_slopes)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.trim_ps {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(Error::Config(format!("trim-ps must lie in (0, 0.5), got {eps}")));
            }
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
            }
        }
        if !(self.glm.gamma >= 0.0) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub negative_ps_count: usize,
    pub bandwidth: Option<f64>,
    pub ps_support: Vec<String>,
    pub om_support: Vec<String>,
    pub ps_lambda: f64,
    pub om_lambda: f64,
    /// Smallest |π̂| over the arm members that enter the weights.
    pub min_abs_ps: f64,
    /// Largest normalized inverse weight within either arm.
    pub max_weight_share: f64,
    pub resample_failures: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub method: Method,
    /// `mu1 − mu0`.
    pub delta: f64,
    pub mu1: f64,
    pub mu0: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    pub diagnostics: Diagnostics,
}

fn weight_at(weights: Option<&[f64]>, i: usize) -> f64 {
    weights.map_or(1.0, |w| w[i])
}

fn arm_members(t: &[Arm], arm: Arm) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] == arm).collect();
    if idx.is_empty() {
        return Err(Error::Estimation(format!("arm {arm} has no members")));
    }
    Ok(idx)
}

/// Normalized (Hájek) IPW mean of arm `arm`:
/// `Σ g_i 1{T_i=k} Y_i / π̂_i  ÷  Σ g_i 1{T_i=k} / π̂_i`.
pub fn normalized_ipw(y: &[f64], t: &[Arm], pi: &[f64], arm: Arm, weights: Option<&[f64]>) -> Result<f64> {
    Ok(hajek(y, t, pi, arm, weights)?.0)
}

/// Hájek mean plus the largest normalized weight share.
fn hajek(y: &[f64], t: &[Arm], pi: &[f64], arm: Arm, weights: Option<&[f64]>) -> Result<(f64, f64)> {
    let members = arm_members(t, arm)?;
    let zeros: Vec<usize> = members.iter().copied().filter(|&i| pi[i] == 0.0 || !pi[i].is_finite()).collect();
    if !zeros.is_empty() {
        return Err(Error::ZeroPropensity(zeros));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut max_w = 0.0_f64;
    for &i in &members {
        let w = weight_at(weights, i) / pi[i];
        num += w * y[i];
        den += w;
        max_w = max_w.max(w.abs());
    }
    if !(den > 0.0) {
        return Err(Error::UnstableWeights(format!(
            "inverse-weight sum for arm {arm} is {den:e}; negative smoothed propensities dominate"
        )));
    }
    Ok((num / den, max_w / den))
}

/// Augmented IPW mean of arm `arm`:
/// `Σ g_i [1{T_i=k}(Y_i − m_i)/π̂_i + m_i] ÷ Σ g_i`.
pub fn aipw_mean(y: &[f64], t: &[Arm], pi: &[f64], m: &[f64], arm: Arm, weights: Option<&[f64]>) -> Result<f64> {
    let members = arm_members(t, arm)?;
    let zeros: Vec<usize> = members.iter().copied().filter(|&i| pi[i] == 0.0 || !pi[i].is_finite()).collect();
    if !zeros.is_empty() {
        return Err(Error::ZeroPropensity(zeros));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        let g = weight_at(weights, i);
        let aug = if t[i] == arm { (y[i] - m[i]) / pi[i] } else { 0.0 };
        num += g * (aug + m[i]);
        den += g;
    }
    Ok(num / den)
}

/// Validates the arms and (optionally) standardizes covariates.
pub fn prepare(d: &Dataset, cfg: &EstimatorConfig) -> Result<(Dataset, Option<Standardization>)> {
    cfg.validate()?;
    d.require_both_arms()?;
    if cfg.standardize {
        let (s, info) = standardize(d)?;
        Ok((s, Some(info)))
    } else {
        Ok((d.clone(), None))
    }
}

/// Penalty levels chosen for the two working models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub ps: f64,
    pub om: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModels {
    pub ps: GlmFit,
    pub om: GlmFit,
}

impl FittedModels {
    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            ps: self.ps.lambda,
            om: self.om.lambda,
        }
    }
}

/// Fits both working models on prepared data. With `lambdas` the penalty levels are
/// reused instead of re-tuned.
pub fn fit_models(
    d: &Dataset,
    cfg: &EstimatorConfig,
    lambdas: Option<Lambdas>,
    weights: Option<&[f64]>,
) -> Result<FittedModels> {
    let ps = fit_working_model(d, &cfg.ps_spec(), &cfg.glm, lambdas.map(|l| l.ps), weights)?;
    let om = fit_working_model(d, &cfg.om_spec(), &cfg.glm, lambdas.map(|l| l.om), weights)?;
    Ok(FittedModels { ps, om })
}

fn clip(pi: &[f64], eps: Option<f64>) -> Vec<f64> {
    match eps {
        Some(e) => pi.iter().map(|p| p.clamp(e, 1.0 - e)).collect(),
        None => pi.to_vec(),
    }
}

fn base_diagnostics(d: &Dataset, fits: &FittedModels) -> Diagnostics {
    let mut warnings = fits.ps.warnings.clone();
    warnings.extend(fits.om.warnings.iter().cloned());
    Diagnostics {
        ps_support: fits.ps.support_names(d.names()),
        om_support: fits.om.support_names(d.names()),
        ps_lambda: fits.ps.lambda,
        om_lambda: fits.om.lambda,
        warnings,
        ..Diagnostics::default()
    }
}

fn min_abs_on_members(t: &[Arm], pi1: &[f64], pi0: &[f64]) -> f64 {
    t.iter()
        .enumerate()
        .map(|(i, &a)| if a == 1 { pi1[i].abs() } else { pi0[i].abs() })
        .fold(f64::INFINITY, f64::min)
}

/// Evaluates the requested estimators on one pair of fits.
///
/// The smoothing step runs only if `dips` is requested. Results are returned in the
/// order of `methods`; one estimator failing does not affect the others.
pub fn estimate_from_fits(
    d: &Dataset,
    fits: &FittedModels,
    methods: &[Method],
    cfg: &EstimatorConfig,
    weights: Option<&[f64]>,
) -> Vec<Result<EffectEstimate>> {
    let dips_model: Option<Result<DipsModel>> = methods
        .contains(&Method::Dips)
        .then(|| build_dips(d, &fits.ps, &fits.om, cfg.bandwidth, weights));
    methods
        .iter()
        .map(|&m| match m {
            Method::Dips => match dips_model.as_ref().expect("built above") {
                Ok(model) => dips_estimate(d, fits, model, cfg, weights),
                Err(e) => Err(Error::Estimation(format!("smoothing failed: {e}"))),
            },
            Method::IpwAlas => ipw_alas_estimate(d, fits, cfg, weights),
            Method::DrAlas => dr_alas_estimate(d, fits, cfg, weights),
        })
        .collect()
}

fn dips_estimate(
    d: &Dataset,
    fits: &FittedModels,
    model: &DipsModel,
    cfg: &EstimatorConfig,
    weights: Option<&[f64]>,
) -> Result<EffectEstimate> {
    let pi1 = clip(&model.estimates.pi1, cfg.trim_ps);
    let pi0 = clip(&model.estimates.pi0, cfg.trim_ps);
    let (mu1, s1) = hajek(d.y(), d.t(), &pi1, 1, weights)?;
    let (mu0, s0) = hajek(d.y(), d.t(), &pi0, 0, weights)?;
    let mut diag = base_diagnostics(d, fits);
    diag.negative_ps_count = model.estimates.negative_count;
    diag.bandwidth = Some(model.bandwidth());
    diag.min_abs_ps = min_abs_on_members(d.t(), &pi1, &pi0);
    diag.max_weight_share = s1.max(s0);
    Ok(EffectEstimate {
        method: Method::Dips,
        delta: mu1 - mu0,
        mu1,
        mu0,
        se: None,
        ci: None,
        p_value: None,
        diagnostics: diag,
    })
}

fn parametric_ps(d: &Dataset, fits: &FittedModels, cfg: &EstimatorConfig, diag: &mut Diagnostics) -> (Vec<f64>, Vec<f64>) {
    let raw1 = fits.ps.predict(d, 1);
    let extreme = d
        .t()
        .iter()
        .zip(&raw1)
        .filter(|(&a, &p)| if a == 1 { p < 1e-12 } else { p > 1.0 - 1e-12 })
        .count();
    if extreme > 0 {
        diag.warnings.push(format!(
            "{extreme} fitted propensities within 1e-12 of 0 or 1; inverse weights are extreme"
        ));
    }
    let pi1 = clip(&raw1, cfg.trim_ps);
    let pi0 = clip(&raw1.iter().map(|p| 1.0 - p).collect::<Vec<_>>(), cfg.trim_ps);
    diag.negative_ps_count = 0;
    diag.min_abs_ps = min_abs_on_members(d.t(), &pi1, &pi0);
    (pi1, pi0)
}

fn ipw_alas_estimate(d: &Dataset, fits: &FittedModels, cfg: &EstimatorConfig, weights: Option<&[f64]>) -> Result<EffectEstimate> {
    let mut diag = base_diagnostics(d, fits);
    let (pi1, pi0) = parametric_ps(d, fits, cfg, &mut diag);
    let (mu1, s1) = hajek(d.y(), d.t(), &pi1, 1, weights)?;
    let (mu0, s0) = hajek(d.y(), d.t(), &pi0, 0, weights)?;
    diag.max_weight_share = s1.max(s0);
    Ok(EffectEstimate {
        method: Method::IpwAlas,
        delta: mu1 - mu0,
        mu1,
        mu0,
        se: None,
        ci: None,
        p_value: None,
        diagnostics: diag,
    })
}

fn dr_alas_estimate(d: &Dataset, fits: &FittedModels, cfg: &EstimatorConfig, weights: Option<&[f64]>) -> Result<EffectEstimate> {
    let mut diag = base_diagnostics(d, fits);
    let (pi1, pi0) = parametric_ps(d, fits, cfg, &mut diag);
    let m1 = fits.om.predict(d, 1);
    let m0 = fits.om.predict(d, 0);
    let mu1 = aipw_mean(d.y(), d.t(), &pi1, &m1, 1, weights)?;
    let mu0 = aipw_mean(d.y(), d.t(), &pi0, &m0, 0, weights)?;
    Ok(EffectEstimate {
        method: Method::DrAlas,
        delta: mu1 - mu0,
        mu1,
        mu0,
        se: None,
        ci: None,
        p_value: None,
        diagnostics: diag,
    })
}

/// Full pipeline for several estimators sharing one pair of working-model fits.
///
/// `d` is the raw dataset; standardization follows `cfg`.
pub fn estimate_many(d: &Dataset, methods: &[Method], cfg: &EstimatorConfig) -> Result<(FittedModels, Vec<Result<EffectEstimate>>)> {
    let (prepared, _) = prepare(d, cfg)?;
    let fits = fit_models(&prepared, cfg, None, None)?;
    let out = estimate_from_fits(&prepared, &fits, methods, cfg, None);
    Ok((fits, out))
}

pub fn estimate(d: &Dataset, method: Method, cfg: &EstimatorConfig) -> Result<EffectEstimate> {
    let (_, mut out) = estimate_many(d, &[method], cfg)?;
    out.pop().expect("one method requested")
}

/// Standardize, fit both working models, smooth over the double index and take the
/// difference of normalized IPW means.
pub fn estimate_dips(d: &Dataset, cfg: &EstimatorConfig) -> Result<EffectEstimate> {
    estimate(d, Method::Dips, cfg)
}

pub fn estimate_ipw_alas(d: &Dataset, cfg: &EstimatorConfig) -> Result<EffectEstimate> {
    estimate(d, Method::IpwAlas, cfg)
}

pub fn estimate_dr_alas(d: &Dataset, cfg: &EstimatorConfig) -> Result<EffectEstimate> {
    estimate(d, Method::DrAlas, cfg)
}
