//! Benchmark simulation scenarios and repetition studies.
//!
//! Covariates are `N(0, Σ)` with a banded, geometrically decaying correlation; the
//! outcome noise is Gaussian (standard deviation 10 unless configured) and the true
//! effect is 1 in every scenario.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_from_fits, fit_models, prepare, EstimatorConfig, Method};
use crate::glm::expit;
use crate::inference::{attach_inference, PerturbationConfig, MAX_FAILURE_SHARE};
use crate::rng::{derive_seed, stream, PURPOSE_DATA, PURPOSE_SEED};
use crate::stats::{mean, sample_sd};

pub const TRUE_EFFECT: f64 = 1.0;
/// Default outcome noise standard deviation.
pub const NOISE_SD: f64 = 10.0;

pub const ALPHA: [f64; 10] = [0.4, -0.3, 0.4, 0.3, 0.3, 0.4, 0.3, -0.3, -0.3, -0.3];
pub const BETA: [f64; 10] = [-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
pub const ALPHA1: [f64; 10] = [0.9, 0.0, -0.9, 0.0, 0.9, 0.0, 0.9, 0.0, -0.9, 0.0];
pub const ALPHA2: [f64; 10] = [0.0, -0.6, 0.0, 0.6, 0.0, 0.6, 0.0, -0.6, 0.0, -0.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    BothCorrect,
    MisspecOutcome,
    MisspecPs,
    BothMisspec,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::BothCorrect,
        Scenario::MisspecOutcome,
        Scenario::MisspecPs,
        Scenario::BothMisspec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::BothCorrect => "both-correct",
            Scenario::MisspecOutcome => "misspec-outcome",
            Scenario::MisspecPs => "misspec-ps",
            Scenario::BothMisspec => "both-misspec",
        }
    }

    fn linear_ps(self) -> bool {
        matches!(self, Scenario::BothCorrect | Scenario::MisspecOutcome)
    }

    fn linear_outcome(self) -> bool {
        matches!(self, Scenario::BothCorrect | Scenario::MisspecPs)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario '{s}' (expected both-correct, misspec-outcome, misspec-ps or both-misspec)"
                ))
            })
    }
}

fn dot10(coef: &[f64; 10], x: &[f64]) -> f64 {
    coef.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Real cube root, odd in its argument.
pub fn signed_cbrt(x: f64) -> f64 {
    x.cbrt()
}

/// `P(T = 1 | x)`.
pub fn true_propensity(scenario: Scenario, x: &[f64]) -> f64 {
    if scenario.linear_ps() {
        expit(dot10(&ALPHA, x))
    } else {
        expit(-1.0 + dot10(&ALPHA1, x) * (0.5 * dot10(&ALPHA2, x) + 0.5))
    }
}

/// `E(Y | x, T = arm)`.
pub fn true_outcome_mean(scenario: Scenario, x: &[f64], arm: u8) -> f64 {
    let lin = dot10(&BETA, x);
    let k = f64::from(arm);
    if scenario.linear_outcome() {
        k + lin
    } else {
        k + 3.0 * signed_cbrt(lin * (lin + 3.0))
    }
}

/// `Σ_ij = 0.4 · 0.5^{|i−j|/3}` for `0 < |i−j| ≤ 15`, zero beyond, unit diagonal.
pub fn build_sigma(p: usize) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(Error::Config("p must be at least 1".into()));
    }
    let s = DMatrix::from_fn(p, p, |i, j| {
        let d = i.abs_diff(j);
        match d {
            0 => 1.0,
            1..=15 => 0.4 * 0.5_f64.powf(d as f64 / 3.0),
            _ => 0.0,
        }
    });
    Cholesky::new(s.clone()).ok_or(Error::NotPositiveDefinite)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Method>,
    /// Standard deviation of the outcome noise.
    pub noise_sd: f64,
    /// Turns on the coverage study for DiPS.
    pub perturb: Option<PerturbationConfig>,
    pub estimator: EstimatorConfig,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, p: usize, reps: usize, seed: u64) -> Self {
        Self {
            scenario,
            n,
            p,
            reps,
            seed,
            estimators: Method::ALL.to_vec(),
            noise_sd: NOISE_SD,
            perturb: None,
            estimator: EstimatorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 10 {
            return Err(Error::Config(format!("p must be at least 10, got {}", self.p)));
        }
        if self.n < 4 {
            return Err(Error::Config(format!("n must be at least 4, got {}", self.n)));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise sd must be non-negative, got {}", self.noise_sd)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        if let Some(pc) = &self.perturb {
            pc.validate()?;
        }
        self.estimator.validate()
    }
}

fn column_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("X{j}")).collect()
}

/// Draws repetition `rep` of the configured scenario; returns the data and the true effect.
pub fn gen_scenario(cfg: &ScenarioConfig, rep: usize) -> Result<(Dataset, f64)> {
    let (n, p) = (cfg.n, cfg.p);
    if p < 10 {
        return Err(Error::Config(format!("p must be at least 10, got {p}")));
    }
    let chol = Cholesky::new(build_sigma(p)?).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut rng = stream(cfg.seed, PURPOSE_DATA, rep as u64);
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut z = vec![0.0; p];
    let mut row = vec![0.0; p];
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for r in 0..p {
            row[r] = (0..=r).map(|c| l[(r, c)] * z[c]).sum();
            x[(i, r)] = row[r];
        }
        let u: f64 = rng.random();
        let arm = u8::from(u < true_propensity(cfg.scenario, &row));
        let e: f64 = rng.sample(StandardNormal);
        t.push(arm);
        y.push(true_outcome_mean(cfg.scenario, &row, arm) + cfg.noise_sd * e);
    }
    Ok((Dataset::new(y, t, x, column_names(p))?, TRUE_EFFECT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub method: Method,
    pub bias: f64,
    pub rmse: f64,
    pub emp_se: f64,
    /// `MSE(dr-alas) / MSE(method)`; absent when dr-alas was not run.
    pub re_vs_dr: Option<f64>,
    pub successes: usize,
    pub failures: usize,
    /// Percentile-interval coverage of the true effect (coverage studies only).
    pub coverage: Option<f64>,
    /// Mean perturbation standard error (coverage studies only).
    pub ase: Option<f64>,
    pub inference_failures: usize,
    /// Per-repetition estimates in repetition order; `None` marks a failure.
    pub estimates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub noise_sd: f64,
    pub truth: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub wall_clock_secs: f64,
}

impl SimReport {
    pub fn summary(&self, method: Method) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.method == method)
    }

    /// Flat table, one row per estimator.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "scenario,n,p,reps,method,bias,rmse,emp_se,re_vs_dr,coverage,ase,failures")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.estimators {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.scenario,
                self.n,
                self.p,
                self.reps,
                s.method,
                s.bias,
                s.rmse,
                s.emp_se,
                opt(s.re_vs_dr),
                opt(s.coverage),
                opt(s.ase),
                s.failures
            )?;
        }
        Ok(())
    }
}

struct RepOutcome {
    deltas: Vec<Option<f64>>,
    /// `(covered, se)` for DiPS when perturbation is on; `None` inside marks a failure.
    coverage: Option<Option<(bool, f64)>>,
}

fn run_rep(cfg: &ScenarioConfig, rep: usize) -> Result<RepOutcome> {
    let (d, truth) = gen_scenario(cfg, rep)?;
    let m = cfg.estimators.len();
    let failed = || RepOutcome {
        deltas: vec![None; m],
        coverage: cfg.perturb.as_ref().map(|_| None),
    };
    let Ok((prepared, _)) = prepare(&d, &cfg.estimator) else {
        return Ok(failed());
    };
    let Ok(fits) = fit_models(&prepared, &cfg.estimator, None, None) else {
        return Ok(failed());
    };
    let ests = estimate_from_fits(&prepared, &fits, &cfg.estimators, &cfg.estimator, None);
    let deltas = ests.iter().map(|r| r.as_ref().ok().map(|e| e.delta)).collect();
    let coverage = match &cfg.perturb {
        None => None,
        Some(pc) => {
            let pos = cfg.estimators.iter().position(|&m| m == Method::Dips);
            let dips = pos.and_then(|i| ests.into_iter().nth(i)).filter(|r| r.is_ok());
            Some(dips.and_then(|r| {
                let mut pc = pc.clone();
                pc.seed = derive_seed(cfg.seed, PURPOSE_SEED, rep as u64);
                let inferred = attach_inference(&prepared, &fits, vec![r], &cfg.estimator, &pc).ok()?;
                let (est, _) = inferred.into_iter().next()?.ok()?;
                let (lo, hi) = est.ci?;
                Some((lo <= truth && truth <= hi, est.se?))
            }))
        }
    };
    Ok(RepOutcome { deltas, coverage })
}

/// Runs all repetitions in parallel and aggregates in repetition order.
///
/// A repetition where an estimator fails is recorded and skipped for that estimator;
/// more than 5% failures for any estimator is an error.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<SimReport> {
    cfg.validate()?;
    let start = Instant::now();
    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep))
        .collect::<Result<_>>()?;

    let mut summaries = Vec::with_capacity(cfg.estimators.len());
    for (k, &method) in cfg.estimators.iter().enumerate() {
        let estimates: Vec<Option<f64>> = outcomes.iter().map(|o| o.deltas[k]).collect();
        let ok: Vec<f64> = estimates.iter().flatten().copied().collect();
        let failures = cfg.reps - ok.len();
        if failures as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 {
            return Err(Error::Estimation(format!(
                "{method} failed in {failures} of {} repetitions",
                cfg.reps
            )));
        }
        let bias = mean(&ok) - TRUE_EFFECT;
        let mse = mean(&ok.iter().map(|v| (v - TRUE_EFFECT).powi(2)).collect::<Vec<_>>());
        let (coverage, ase, inference_failures) = if method == Method::Dips && cfg.perturb.is_some() {
            let cov: Vec<(bool, f64)> = outcomes.iter().filter_map(|o| o.coverage.flatten()).collect();
            let inf_fail = cfg.reps - cov.len();
            if cov.is_empty() {
                (None, None, inf_fail)
            } else {
                let hits = cov.iter().filter(|c| c.0).count() as f64;
                let ses: Vec<f64> = cov.iter().map(|c| c.1).collect();
                (Some(hits / cov.len() as f64), Some(mean(&ses)), inf_fail)
            }
        } else {
            (None, None, 0)
        };
        summaries.push((
            EstimatorSummary {
                method,
                bias,
                rmse: mse.sqrt(),
                emp_se: sample_sd(&ok),
                re_vs_dr: None,
                successes: ok.len(),
                failures,
                coverage,
                ase,
                inference_failures,
                estimates,
            },
            mse,
        ));
    }
    if let Some(dr_mse) = summaries.iter().find(|(s, _)| s.method == Method::DrAlas).map(|(_, m)| *m) {
        for (s, mse) in summaries.iter_mut() {
            s.re_vs_dr = Some(if s.method == Method::DrAlas { 1.0 } else { dr_mse / *mse });
        }
    }
    Ok(SimReport {
        scenario: cfg.scenario,
        n: cfg.n,
        p: cfg.p,
        reps: cfg.reps,
        seed: cfg.seed,
        noise_sd: cfg.noise_sd,
        truth: TRUE_EFFECT,
        estimators: summaries.into_iter().map(|(s, _)| s).collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_entries() {
        let s = build_sigma(20).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        assert!((s[(0, 3)] - 0.2).abs() < 1e-15);
        assert!((s[(5, 2)] - 0.2).abs() < 1e-15);
        assert!(s[(0, 15)] > 0.0);
        assert_eq!(s[(0, 16)], 0.0);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn sigma_positive_definite_up_to_200() {
        for p in [1, 10, 15, 30, 75, 200] {
            assert!(build_sigma(p).is_ok(), "p = {p}");
        }
    }

    #[test]
    fn propensity_at_origin() {
        let zero = [0.0; 15];
        assert_eq!(true_propensity(Scenario::BothCorrect, &zero), 0.5);
        assert!((true_propensity(Scenario::MisspecPs, &zero) - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn cube_root_is_odd() {
        for x in [0.0, 0.3, 2.0, 27.0, 1e5] {
            assert_eq!(signed_cbrt(-x), -signed_cbrt(x));
            let c = signed_cbrt(x);
            assert!((c * c * c - x).abs() <= 1e-12 * x.max(1.0));
        }
    }

    #[test]
    fn effect_is_one_pointwise() {
        let x = [0.3, -1.2, 2.0, 0.1, -0.5, 0.7, 1.1, -2.2, 0.0, 0.4, 9.0];
        for sc in Scenario::ALL {
            let d = true_outcome_mean(sc, &x, 1) - true_outcome_mean(sc, &x, 0);
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = ScenarioConfig::new(Scenario::MisspecPs, 50, 12, 1, 4);
        let (a, truth) = gen_scenario(&cfg, 3).unwrap();
        let (b, _) = gen_scenario(&cfg, 3).unwrap();
        assert_eq!(truth, 1.0);
        assert_eq!(a.y(), b.y());
        assert_eq!(a.x(), b.x());
        let (c, _) = gen_scenario(&cfg, 4).unwrap();
        assert_ne!(a.y(), c.y());
    }

    #[test]
    fn p_below_ten_rejected() {
        let cfg = ScenarioConfig::new(Scenario::BothCorrect, 50, 9, 1, 4);
        assert!(matches!(gen_scenario(&cfg, 0), Err(Error::Config(_))));
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
    }
}
