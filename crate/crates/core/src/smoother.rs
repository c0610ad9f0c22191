//! Double-index propensity smoothing.
//!
//! For each arm the treatment indicator is smoothed over the pair of fitted linear
//! predictors `(α̂ᵀX, β̂_kᵀX)` with a bivariate fourth-order Gaussian product kernel.
//! Each index is standardized and mapped through the normal CDF first, so both
//! components are roughly uniform on (0, 1) and share one bandwidth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::glm::GlmFit;
use crate::stats::{self, normal_cdf, normal_pdf};

/// Kernel order used throughout.
pub const KERNEL_ORDER: u32 = 4;

/// Univariate fourth-order Gaussian kernel `½(3 − u²)φ(u)`.
pub fn k4(u: f64) -> f64 {
    0.5 * (3.0 - u * u) * normal_pdf(u)
}

/// Bivariate product kernel `k4(u₁)·k4(u₂)`.
pub fn kernel_q4(u: [f64; 2]) -> f64 {
    k4(u[0]) * k4(u[1])
}

/// `Φ((raw − mean)/sd)` with the sample SD; fails when the scores are constant.
pub fn transform_scores(raw: &[f64]) -> Result<Vec<f64>> {
    let m = stats::mean(raw);
    let sd = stats::sample_sd(raw);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateScore("score has zero sample variance".into()));
    }
    Ok(raw.iter().map(|r| normal_cdf((r - m) / sd)).collect())
}

/// Plug-in bandwidth `sigma · n^(−1/(q+2))`.
pub fn plugin_bandwidth(n: usize, q: u32, sigma: f64) -> f64 {
    sigma * (n as f64).powf(-1.0 / (q as f64 + 2.0))
}

/// Kernel-weighted arm shares at every evaluation point: returns `(π̂₀, π̂₁)`.
///
/// Uses the V-statistic form: the data point at the evaluation location is included.
fn smooth_arms(
    eval: &[[f64; 2]],
    data: &[[f64; 2]],
    t: &[Arm],
    h: f64,
    weights: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
    }
    if t.len() != data.len() || weights.is_some_and(|w| w.len() != data.len()) {
        return Err(Error::Config("score, treatment and weight lengths differ".into()));
    }
    let inv_h = 1.0 / h;
    // (u1, u2, weight·1{T=1}, weight·1{T=0})
    let pts: Vec<[f64; 4]> = data
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let g = weights.map_or(1.0, |w| w[j]);
            let (g1, g0) = if t[j] == 1 { (g, 0.0) } else { (0.0, g) };
            [s[0] * inv_h, s[1] * inv_h, g1, g0]
        })
        .collect();
    // K_h(u) = h⁻² k4(u₁/h) k4(u₂/h); constants collected outside the loop
    let scale = 0.25 / (2.0 * std::f64::consts::PI) * inv_h * inv_h;
    let sums: Vec<(f64, f64, f64)> = eval
        .par_iter()
        .map(|e| {
            let (e1, e2) = (e[0] * inv_h, e[1] * inv_h);
            let (mut den, mut num1, mut num0) = (0.0, 0.0, 0.0);
            for p in &pts {
                let d1 = p[0] - e1;
                let d2 = p[1] - e2;
                let q1 = d1 * d1;
                let q2 = d2 * d2;
                let k = (3.0 - q1) * (3.0 - q2) * (-0.5 * (q1 + q2)).exp();
                let a1 = k * p[2];
                let a0 = k * p[3];
                num1 += a1;
                num0 += a0;
                den += a1 + a0;
            }
            (den * scale, num1 * scale, num0 * scale)
        })
        .collect();
    let mut pi0 = Vec::with_capacity(eval.len());
    let mut pi1 = Vec::with_capacity(eval.len());
    for (i, (den, num1, num0)) in sums.into_iter().enumerate() {
        if den.abs() < 1e-300 || !den.is_finite() {
            return Err(Error::SmoothingDegeneracy(i));
        }
        pi0.push(num0 / den);
        pi1.push(num1 / den);
    }
    Ok((pi0, pi1))
}

/// Smoothed propensity of arm `arm` at each evaluation point.
///
/// `π̂_k(s) = Σ_j g_j K_h(S_j − s) 1{T_j = k} / Σ_j g_j K_h(S_j − s)`, with `g ≡ 1` when
/// no weights are given. Both score matrices must be on the same transformed scale.
pub fn dips_pi(
    eval: &[[f64; 2]],
    data: &[[f64; 2]],
    t: &[Arm],
    arm: Arm,
    h: f64,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let (pi0, pi1) = smooth_arms(eval, data, t, h, weights)?;
    Ok(if arm == 1 { pi1 } else { pi0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleIndexScores {
    pub arm: Arm,
    /// `α̂ᵀX_i`.
    pub s_alpha: Vec<f64>,
    /// `β̂_kᵀX_i`.
    pub s_beta: Vec<f64>,
    /// Normal-CDF transformed scores; a constant column is held at 0.5.
    pub transformed: Vec<[f64; 2]>,
    /// Which components carry information. A constant component contributes the same
    /// kernel factor to every term, so smoothing reduces to the surviving component.
    pub active: [bool; 2],
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityEstimates {
    pub pi1: Vec<f64>,
    pub pi0: Vec<f64>,
    /// Number of negative values across both vectors.
    pub negative_count: usize,
    pub min_abs_value: f64,
}

impl PropensityEstimates {
    fn new(pi0: Vec<f64>, pi1: Vec<f64>) -> Self {
        let all = pi0.iter().chain(&pi1);
        let negative_count = all.clone().filter(|v| **v < 0.0).count();
        let min_abs_value = all.map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        Self {
            pi1,
            pi0,
            negative_count,
            min_abs_value,
        }
    }

    pub fn arm(&self, arm: Arm) -> &[f64] {
        if arm == 1 {
            &self.pi1
        } else {
            &self.pi0
        }
    }

    /// Copy with every value clipped into `[eps, 1 − eps]`.
    pub fn trimmed(&self, eps: f64) -> Self {
        let clip = |v: &Vec<f64>| v.iter().map(|p| p.clamp(eps, 1.0 - eps)).collect();
        Self::new(clip(&self.pi0), clip(&self.pi1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipsModel {
    pub scores: [DoubleIndexScores; 2],
    pub estimates: PropensityEstimates,
}

impl DipsModel {
    pub fn bandwidth(&self) -> f64 {
        self.scores[0].bandwidth
    }
}

fn transform_or_constant(raw: &[f64]) -> (Vec<f64>, bool) {
    match transform_scores(raw) {
        Ok(v) => (v, true),
        Err(_) => (vec![0.5; raw.len()], false),
    }
}

/// Builds both arms' double-index scores from the fitted working models and smooths the
/// treatment indicator over them.
///
/// The common bandwidth is the plug-in `σ n^(−1/6)` with `σ` the pooled sample SD of the
/// informative transformed components, unless `h_override` is given. `weights` perturb the
/// kernel sums (all ones when `None`).
pub fn build_dips(
    d: &Dataset,
    ps_fit: &GlmFit,
    om_fit: &GlmFit,
    h_override: Option<f64>,
    weights: Option<&[f64]>,
) -> Result<DipsModel> {
    let n = d.n();
    let s_alpha = ps_fit.linear_predictor(d, 0);
    let (alpha_tr, alpha_active) = transform_or_constant(&s_alpha);
    let shared = om_fit.coefficients.len() == 1;

    let mut cols: Vec<(Vec<f64>, Vec<f64>, bool)> = Vec::new();
    for arm in 0..2u8 {
        if shared && arm == 1 {
            let first = cols[0].clone();
            cols.push(first);
            continue;
        }
        let s_beta = om_fit.linear_predictor(d, arm);
        let (tr, active) = transform_or_constant(&s_beta);
        cols.push((s_beta, tr, active));
    }

    let h = match h_override {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Config(format!("bandwidth override must be positive, got {h}"))),
        None => {
            let mut vars = Vec::new();
            if alpha_active {
                vars.push(stats::sample_sd(&alpha_tr).powi(2));
            }
            for (_, tr, active) in cols.iter().take(if shared { 1 } else { 2 }) {
                if *active {
                    vars.push(stats::sample_sd(tr).powi(2));
                }
            }
            let sigma = if vars.is_empty() {
                (1.0f64 / 12.0).sqrt()
            } else {
                (vars.iter().sum::<f64>() / vars.len() as f64).sqrt()
            };
            plugin_bandwidth(n, KERNEL_ORDER, sigma)
        }
    };

    let scores: Vec<DoubleIndexScores> = cols
        .into_iter()
        .enumerate()
        .map(|(arm, (s_beta, tr, active))| DoubleIndexScores {
            arm: arm as Arm,
            s_alpha: s_alpha.clone(),
            s_beta,
            transformed: alpha_tr.iter().zip(&tr).map(|(a, b)| [*a, *b]).collect(),
            active: [alpha_active, active],
            bandwidth: h,
        })
        .collect();

    let (pi0, pi1) = if shared {
        let pts = &scores[0].transformed;
        smooth_arms(pts, pts, d.t(), h, weights)?
    } else {
        let p0 = &scores[0].transformed;
        let p1 = &scores[1].transformed;
        let (pi0, _) = smooth_arms(p0, p0, d.t(), h, weights)?;
        let (_, pi1) = smooth_arms(p1, p1, d.t(), h, weights)?;
        (pi0, pi1)
    };
    let [s0, s1]: [DoubleIndexScores; 2] = scores.try_into().expect("two arms");
    Ok(DipsModel {
        scores: [s0, s1],
        estimates: PropensityEstimates::new(pi0, pi1),
    })
}
