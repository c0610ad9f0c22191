//! Working-model fits: ridge initial weights, adaptive LASSO by coordinate descent,
//! information-criterion tuning of the penalty level, and unpenalized refits on the
//! selected support.
//!
//! Every fit minimizes a loss normalized by the total observation weight,
//!
//! ```text
//! F(b) = (1/W) Σ_i w_i · loss(y_i, η_i) + Σ_j pf_j |b_j| + ½ Σ_j r_j b_j²,   W = Σ_i w_i
//! ```
//!
//! where the gaussian loss is `½(y − η)²` and the binomial loss is the negative
//! Bernoulli log-likelihood under the logit link. Observation weights are all ones for
//! ordinary fits and carry the multipliers during perturbation resampling; normalizing
//! by `W` makes every fit invariant to a constant rescaling of the weights.
//!
//! Coefficients are stored in a *layout*: unpenalized terms first (intercept, and the
//! treatment main effect for the outcome model), then the penalized slopes. For the
//! outcome model with arm-specific slopes the penalized block is `[(1−T)X, TX]`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Identity link, squared-error loss.
    Gaussian,
    /// Logit link, Bernoulli likelihood.
    Binomial,
}

impl Family {
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Binomial => expit(eta),
        }
    }

    fn loss(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * (y - eta) * (y - eta),
            Family::Binomial => softplus(eta) - y * eta,
        }
    }

    fn check_response(self, y: &[f64]) -> Result<()> {
        match self {
            Family::Gaussian => Ok(()),
            Family::Binomial => match y.iter().position(|&v| v != 0.0 && v != 1.0) {
                Some(i) => Err(Error::Domain(format!(
                    "binomial family needs a 0/1 response, found {} at row {}",
                    y[i],
                    i + 1
                ))),
                None => Ok(()),
            },
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Which column of the dataset the model explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Response {
    Treatment,
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: Response,
    pub family: Family,
    /// Outcome model only: separate slope vectors per arm instead of a shared one.
    pub arm_specific_slopes: bool,
}

impl ModelSpec {
    /// Logistic propensity model `T ~ 1 + X`.
    pub fn propensity() -> Self {
        Self {
            response: Response::Treatment,
            family: Family::Binomial,
            arm_specific_slopes: false,
        }
    }

    /// Main-effects outcome model `Y ~ 1 + T + X`.
    pub fn outcome(family: Family) -> Self {
        Self {
            response: Response::Outcome,
            family,
            arm_specific_slopes: false,
        }
    }

    pub fn with_arm_specific_slopes(mut self, on: bool) -> Self {
        self.arm_specific_slopes = on && self.response == Response::Outcome;
        self
    }

    /// Number of unpenalized leading terms in the coefficient layout.
    pub fn n_unpenalized(&self) -> usize {
        match self.response {
            Response::Treatment => 1,
            Response::Outcome => 2,
        }
    }

    /// Number of penalized slopes for `p` covariates.
    pub fn n_penalized(&self, p: usize) -> usize {
        if self.arm_specific_slopes {
            2 * p
        } else {
            p
        }
    }
}

/// Tuning rule for the penalty level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Criterion {
    /// `−2·loglik + ν·|S|·ln(n·φ/λ)` with `φ` the refit dispersion (1 for binomial).
    Eric { nu: f64 },
    /// `−2·loglik + |S|·ln n`.
    Bic,
}

impl Default for Criterion {
    fn default() -> Self {
        Criterion::Eric { nu: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmOptions {
    /// Exponent on the ridge coefficients forming the adaptive weights.
    pub gamma: f64,
    /// Ridge penalty for the initial fit; `None` means `1/n`.
    pub ridge_lambda: Option<f64>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub criterion: Criterion,
    /// Convergence threshold on the largest coefficient change per outer iteration.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            ridge_lambda: None,
            n_lambda: 50,
            lambda_min_ratio: 1e-4,
            criterion: Criterion::default(),
            tol: 1e-8,
            max_sweeps: 1000,
        }
    }
}

/// One point of the tuning trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub lambda: f64,
    pub criterion: f64,
    pub support_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    /// Unpenalized terms, in layout order.
    pub intercepts: Vec<f64>,
    /// Penalized slopes, in layout order.
    pub slopes: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// A fitted working model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub spec: ModelSpec,
    /// `[α0]` for the propensity model; `[β0, β1]` (intercept, treatment main effect) for the outcome model.
    pub intercepts: Vec<f64>,
    /// One slope vector, or `[arm 0, arm 1]` when slopes are arm-specific.
    pub coefficients: Vec<Vec<f64>>,
    /// Nonzero penalized slopes, as indices into the penalized layout.
    pub support: Vec<usize>,
    pub lambda: f64,
    pub gamma: f64,
    /// Adaptive weights `|w̃_j|^γ`; the penalty on slope `j` is `λ|b_j| / weight_j`.
    pub penalty_weights: Vec<f64>,
    pub eric_trace: Vec<TracePoint>,
    /// True once the coefficients are the unpenalized MLE on `support`.
    pub refit: bool,
    pub warnings: Vec<String>,
    /// Penalized objective after each solver pass (gaussian: CD sweeps; binomial: IRLS steps).
    #[serde(skip)]
    pub objective_path: Vec<f64>,
}

impl GlmFit {
    /// All coefficients in layout order.
    pub fn layout(&self) -> Vec<f64> {
        let mut b = self.intercepts.clone();
        for c in &self.coefficients {
            b.extend_from_slice(c);
        }
        b
    }

    fn from_layout(&self, b: &[f64], p: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let u = self.spec.n_unpenalized();
        let pen = &b[u..];
        let coefs = if self.spec.arm_specific_slopes {
            vec![pen[..p].to_vec(), pen[p..].to_vec()]
        } else {
            vec![pen.to_vec()]
        };
        (b[..u].to_vec(), coefs)
    }

    /// Slope vector used for arm `k`.
    pub fn slopes(&self, arm: Arm) -> &[f64] {
        if self.coefficients.len() == 2 {
            &self.coefficients[arm as usize]
        } else {
            &self.coefficients[0]
        }
    }

    /// `slopesᵀX_i` for every row, without intercept terms.
    pub fn linear_predictor(&self, d: &Dataset, arm: Arm) -> Vec<f64> {
        let mut out = vec![0.0; d.n()];
        for (j, &b) in self.slopes(arm).iter().enumerate() {
            if b != 0.0 {
                for (o, x) in out.iter_mut().zip(d.column(j)) {
                    *o += b * x;
                }
            }
        }
        out
    }

    /// Fitted mean on the response scale, with the treatment indicator set to `arm`.
    ///
    /// For the propensity model this is `P(T = 1 | X)` and `arm` is ignored.
    pub fn predict(&self, d: &Dataset, arm: Arm) -> Vec<f64> {
        let offset = match self.spec.response {
            Response::Treatment => self.intercepts[0],
            Response::Outcome => self.intercepts[0] + self.intercepts[1] * arm as f64,
        };
        self.linear_predictor(d, arm)
            .into_iter()
            .map(|s| self.spec.family.inverse_link(offset + s))
            .collect()
    }

    /// Covariate names of the support; arm-specific slopes carry an `@arm` suffix.
    pub fn support_names(&self, names: &[String]) -> Vec<String> {
        let p = names.len();
        self.support
            .iter()
            .map(|&j| {
                if self.spec.arm_specific_slopes {
                    format!("{}@{}", names[j % p], j / p)
                } else {
                    names[j].clone()
                }
            })
            .collect()
    }
}

/// Design matrix for one working model, columns stored contiguously.
struct Design {
    cols: Vec<Vec<f64>>,
    y: Vec<f64>,
    n_unpen: usize,
    family: Family,
}

impl Design {
    fn new(d: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let n = d.n();
        let t: Vec<f64> = d.t().iter().map(|&v| v as f64).collect();
        let mut cols = vec![vec![1.0; n]];
        let y = match spec.response {
            Response::Treatment => t.clone(),
            Response::Outcome => {
                cols.push(t.clone());
                d.y().to_vec()
            }
        };
        spec.family.check_response(&y)?;
        if spec.arm_specific_slopes {
            for arm in [0.0, 1.0] {
                for j in 0..d.p() {
                    let c = d.column(j).iter().zip(&t).map(|(x, tv)| if *tv == arm { *x } else { 0.0 }).collect();
                    cols.push(c);
                }
            }
        } else {
            for j in 0..d.p() {
                cols.push(d.column(j).to_vec());
            }
        }
        Ok(Self {
            cols,
            y,
            n_unpen: spec.n_unpenalized(),
            family: spec.family,
        })
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn m(&self) -> usize {
        self.cols.len()
    }

    fn eta(&self, b: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n()];
        for (col, &bj) in self.cols.iter().zip(b) {
            if bj != 0.0 {
                for (e, x) in eta.iter_mut().zip(col) {
                    *e += bj * x;
                }
            }
        }
        eta
    }

    /// `(1/W) Σ w_i loss_i`.
    fn mean_loss(&self, eta: &[f64], w: &[f64], wsum: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n() {
            s += w[i] * self.family.loss(self.y[i], eta[i]);
        }
        s / wsum
    }

    /// Gradient of the mean loss with respect to every layout coefficient.
    fn gradient(&self, eta: &[f64], w: &[f64], wsum: f64) -> Vec<f64> {
        let resid: Vec<f64> = (0..self.n())
            .map(|i| w[i] * (self.family.inverse_link(eta[i]) - self.y[i]))
            .collect();
        self.cols.iter().map(|c| dot(c, &resid) / wsum).collect()
    }

    /// Weighted Gram matrix `(1/W) Σ v_i x_i x_iᵀ` over `active` columns (row-major) and
    /// the linear term `(1/W) Σ x_i z_i`.
    fn gram(&self, active: &[usize], v: &[f64], z: &[f64], wsum: f64) -> (Vec<f64>, Vec<f64>) {
        let k = active.len();
        let mut a = vec![0.0; k * k];
        let mut c = vec![0.0; k];
        let mut vx = vec![0.0; self.n()];
        for (r, &j) in active.iter().enumerate() {
            let cj = &self.cols[j];
            for i in 0..vx.len() {
                vx[i] = v[i] * cj[i];
            }
            for (s, &l) in active.iter().enumerate().skip(r) {
                let val = dot(&vx, &self.cols[l]) / wsum;
                a[r * k + s] = val;
                a[s * k + r] = val;
            }
            c[r] = dot(cj, z) / wsum;
        }
        (a, c)
    }

    /// Gram system of the quadratic approximation of the loss at `eta`, in the form
    /// `½ bᵀAb − cᵀb` (exact for gaussian).
    fn quadratic(&self, active: &[usize], eta: &[f64], w: &[f64], wsum: f64) -> (Vec<f64>, Vec<f64>) {
        match self.family {
            Family::Gaussian => {
                let z: Vec<f64> = w.iter().zip(&self.y).map(|(wi, yi)| wi * yi).collect();
                self.gram(active, w, &z, wsum)
            }
            Family::Binomial => {
                let mut v = vec![0.0; self.n()];
                let mut z = vec![0.0; self.n()];
                for i in 0..self.n() {
                    let p = expit(eta[i]);
                    v[i] = w[i] * (p * (1.0 - p)).max(1e-12);
                    z[i] = v[i] * eta[i] + w[i] * (self.y[i] - p);
                }
                self.gram(active, &v, &z, wsum)
            }
        }
    }

    /// Unweighted-scale log-likelihood `(n/W) Σ w_i ℓ_i` and the dispersion estimate.
    fn loglik(&self, eta: &[f64], w: &[f64], wsum: f64) -> (f64, f64) {
        let n = self.n() as f64;
        match self.family {
            Family::Gaussian => {
                let sigma2 = (2.0 * self.mean_loss(eta, w, wsum)).max(1e-300);
                let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
                (ll, sigma2)
            }
            Family::Binomial => (-n * self.mean_loss(eta, w, wsum), 1.0),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_weights(w: &[f64], n: usize) -> Result<f64> {
    if w.len() != n {
        return Err(Error::Config(format!("{} observation weights for {n} rows", w.len())));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("observation weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Estimation("observation weights sum to zero".into()));
    }
    Ok(s)
}

/// Coordinate descent on `½ bᵀAb − cᵀb + Σ pf_j|b_j| + ½ Σ r_j b_j²` (A row-major `k×k`).
///
/// Returns the number of sweeps; `on_sweep` sees the iterate after every sweep.
fn cd_quadratic(
    a: &[f64],
    c: &[f64],
    pf: &[f64],
    ridge: &[f64],
    b: &mut [f64],
    tol: f64,
    max_sweeps: usize,
    mut on_sweep: impl FnMut(&[f64]),
) -> usize {
    let k = c.len();
    // grad = A b − c, kept in sync with b
    let mut grad: Vec<f64> = (0..k).map(|j| dot(&a[j * k..(j + 1) * k], b) - c[j]).collect();
    for sweep in 1..=max_sweeps {
        let mut max_change = 0.0_f64;
        for j in 0..k {
            let ajj = a[j * k + j];
            let old = b[j];
            let new = if pf[j].is_infinite() || ajj + ridge[j] <= 0.0 {
                0.0
            } else {
                soft_threshold(ajj * old - grad[j], pf[j]) / (ajj + ridge[j])
            };
            let delta = new - old;
            if delta != 0.0 {
                b[j] = new;
                for (l, g) in grad.iter_mut().enumerate() {
                    *g += delta * a[l * k + j];
                }
                max_change = max_change.max(delta.abs());
            }
        }
        on_sweep(b);
        if max_change < tol {
            return sweep;
        }
    }
    max_sweeps
}

fn quadratic_objective(a: &[f64], c: &[f64], pf: &[f64], ridge: &[f64], b: &[f64]) -> f64 {
    let k = c.len();
    let mut f = 0.0;
    for j in 0..k {
        f += 0.5 * b[j] * dot(&a[j * k..(j + 1) * k], b) - c[j] * b[j];
        if b[j] != 0.0 {
            f += pf[j] * b[j].abs() + 0.5 * ridge[j] * b[j] * b[j];
        }
    }
    f
}

/// Penalized solver over a fixed design and observation weights.
struct Solver<'a> {
    design: &'a Design,
    w: &'a [f64],
    wsum: f64,
    tol: f64,
    max_sweeps: usize,
    /// Gaussian Gram system over all columns, computed once.
    gaussian_gram: Option<(Vec<f64>, Vec<f64>, f64)>,
}

struct Solution {
    b: Vec<f64>,
    objective_path: Vec<f64>,
    converged: bool,
}

impl<'a> Solver<'a> {
    fn new(design: &'a Design, w: &'a [f64], opts: &GlmOptions) -> Result<Self> {
        let wsum = check_weights(w, design.n())?;
        let gaussian_gram = match design.family {
            Family::Gaussian => {
                let all: Vec<usize> = (0..design.m()).collect();
                let zero = vec![0.0; design.n()];
                let (a, c) = design.quadratic(&all, &zero, w, wsum);
                let yy = design.y.iter().zip(w).map(|(y, wi)| wi * y * y).sum::<f64>() / wsum;
                Some((a, c, 0.5 * yy))
            }
            Family::Binomial => None,
        };
        Ok(Self {
            design,
            w,
            wsum,
            tol: opts.tol,
            max_sweeps: opts.max_sweeps,
            gaussian_gram,
        })
    }

    fn objective(&self, b: &[f64], pf: &[f64]) -> f64 {
        let eta = self.design.eta(b);
        let mut f = self.design.mean_loss(&eta, self.w, self.wsum);
        for (bj, p) in b.iter().zip(pf) {
            if *bj != 0.0 {
                f += p * bj.abs();
            }
        }
        f
    }

    /// Starting point: intercept at the link of the weighted response mean, all else zero.
    fn null_start(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.design.m()];
        let ybar = dot(self.w, &self.design.y) / self.wsum;
        b[0] = match self.design.family {
            Family::Gaussian => ybar,
            Family::Binomial => {
                let p = ybar.clamp(1e-10, 1.0 - 1e-10);
                (p / (1.0 - p)).ln()
            }
        };
        b
    }

    /// Minimizes the weighted loss plus `Σ pf_j|b_j|` (unpenalized terms have `pf = 0`).
    fn solve(&self, pf: &[f64], mut b: Vec<f64>) -> Solution {
        let m = self.design.m();
        let ridge = vec![0.0; m];
        let inner_tol = self.tol * 1e-2;
        let mut path = Vec::new();
        if let Some((a, c, yy)) = &self.gaussian_gram {
            let sweeps = cd_quadratic(a, c, pf, &ridge, &mut b, inner_tol, self.max_sweeps, |bb| {
                path.push(yy + quadratic_objective(a, c, pf, &ridge, bb));
            });
            return Solution {
                b,
                objective_path: path,
                converged: sweeps < self.max_sweeps,
            };
        }

        let all: Vec<usize> = (0..m).collect();
        let mut f = self.objective(&b, pf);
        path.push(f);
        let max_outer = 100;
        for _ in 0..max_outer {
            let eta = self.design.eta(&b);
            let (a, c) = self.design.quadratic(&all, &eta, self.w, self.wsum);
            let mut target = b.clone();
            cd_quadratic(&a, &c, pf, &ridge, &mut target, inner_tol, self.max_sweeps, |_| {});
            // step-halving keeps the true objective monotone
            let mut step = 1.0;
            let (cand, fc) = loop {
                let cand: Vec<f64> = b.iter().zip(&target).map(|(o, t)| o + step * (t - o)).collect();
                let fc = self.objective(&cand, pf);
                if fc <= f + 1e-13 * f.abs().max(1.0) {
                    break (cand, fc);
                }
                step *= 0.5;
                if step < 1e-10 {
                    break (b.clone(), f);
                }
            };
            let change = max_abs_diff(&cand, &b);
            b = cand;
            f = fc;
            path.push(f);
            if change < self.tol {
                return Solution {
                    b,
                    objective_path: path,
                    converged: true,
                };
            }
        }
        Solution {
            b,
            objective_path: path,
            converged: false,
        }
    }

    /// Newton's method for the loss plus `½ r Σ_{penalized active} b_j²`, over `active` columns only.
    fn newton(&self, active: &[usize], ridge: f64) -> Result<(Vec<f64>, f64, usize)> {
        let m = self.design.m();
        let k = active.len();
        let u = self.design.n_unpen;
        let rvec: Vec<f64> = active.iter().map(|&j| if j >= u { ridge } else { 0.0 }).collect();
        let mut full = self.null_start();
        let penalty = |full: &[f64]| -> f64 { active.iter().zip(&rvec).map(|(&j, r)| 0.5 * r * full[j] * full[j]).sum() };
        let objective = |full: &[f64]| -> f64 {
            let eta = self.design.eta(full);
            self.design.mean_loss(&eta, self.w, self.wsum) + penalty(full)
        };
        let mut f = objective(&full);
        let max_iter = 100;
        for iter in 1..=max_iter {
            let eta = self.design.eta(&full);
            let (a, c) = self.design.quadratic(active, &eta, self.w, self.wsum);
            let mut h = DMatrix::from_row_slice(k, k, &a);
            for r in 0..k {
                h[(r, r)] += rvec[r];
            }
            let g_full = self.design.gradient(&eta, self.w, self.wsum);
            let g = DVector::from_iterator(k, active.iter().enumerate().map(|(r, &j)| g_full[j] + rvec[r] * full[j]));
            let chol = h.cholesky().ok_or(Error::Solver { iterations: iter, objective: f })?;
            let step = chol.solve(&g);
            if self.design.family == Family::Gaussian {
                // exact normal equations: A b = c
                let rhs = DVector::from_vec(c);
                let sol = chol.solve(&rhs);
                let mut out = vec![0.0; m];
                for (r, &j) in active.iter().enumerate() {
                    out[j] = sol[r];
                }
                let fo = objective(&out);
                return Ok((out, fo, 1));
            }
            let mut t = 1.0;
            let (cand, fc) = loop {
                let mut cand = full.clone();
                for (r, &j) in active.iter().enumerate() {
                    cand[j] -= t * step[r];
                }
                let fc = objective(&cand);
                if fc <= f + 1e-14 * f.abs().max(1.0) || t < 1e-10 {
                    break (cand, fc);
                }
                t *= 0.5;
            };
            let change = max_abs_diff(&cand, &full);
            full = cand;
            f = fc;
            if full.iter().any(|v| !v.is_finite() || v.abs() > 1e4) {
                return Err(Error::Solver { iterations: iter, objective: f });
            }
            if change < 1e-12 || g.amax() < 1e-14 {
                return Ok((full, f, iter));
            }
        }
        Err(Error::Solver {
            iterations: max_iter,
            objective: f,
        })
    }
}

fn unit_or(w: Option<&[f64]>, n: usize) -> std::borrow::Cow<'_, [f64]> {
    match w {
        Some(w) => std::borrow::Cow::Borrowed(w),
        None => std::borrow::Cow::Owned(vec![1.0; n]),
    }
}

/// Ridge fit with unpenalized intercept terms: minimizes `(1/W)·(−loglik) + ridge_lambda·‖slopes‖²/2`.
pub fn fit_ridge(d: &Dataset, spec: &ModelSpec, ridge_lambda: f64, obs_weights: Option<&[f64]>) -> Result<RidgeFit> {
    if !(ridge_lambda > 0.0) {
        return Err(Error::Config(format!("ridge_lambda must be positive, got {ridge_lambda}")));
    }
    let design = Design::new(d, spec)?;
    let w = unit_or(obs_weights, d.n());
    let solver = Solver::new(&design, &w, &GlmOptions::default())?;
    let all: Vec<usize> = (0..design.m()).collect();
    let (b, objective, iterations) = solver.newton(&all, ridge_lambda)?;
    let u = design.n_unpen;
    Ok(RidgeFit {
        intercepts: b[..u].to_vec(),
        slopes: b[u..].to_vec(),
        objective,
        iterations,
    })
}

/// Adaptive weights `|w̃_j|^γ` from initial slope estimates.
pub fn adaptive_weights(initial: &[f64], gamma: f64) -> Vec<f64> {
    initial.iter().map(|w| w.abs().powf(gamma)).collect()
}

fn penalty_factors(n_unpen: usize, weights: &[f64], lambda: f64) -> Vec<f64> {
    let mut pf = vec![0.0; n_unpen];
    pf.extend(weights.iter().map(|&w| if w > 0.0 { lambda / w } else { f64::INFINITY }));
    pf
}

fn check_penalty_weights(spec: &ModelSpec, d: &Dataset, weights: &[f64]) -> Result<()> {
    let want = spec.n_penalized(d.p());
    if weights.len() != want {
        return Err(Error::Config(format!("{} penalty weights for {want} penalized slopes", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("penalty weights must be finite and non-negative".into()));
    }
    Ok(())
}

fn support_of(b: &[f64], n_unpen: usize) -> Vec<usize> {
    b[n_unpen..]
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, _)| j)
        .collect()
}

fn assemble(
    spec: &ModelSpec,
    p: usize,
    b: &[f64],
    lambda: f64,
    gamma: f64,
    weights: &[f64],
    objective_path: Vec<f64>,
    warnings: Vec<String>,
) -> GlmFit {
    let mut fit = GlmFit {
        spec: *spec,
        intercepts: Vec::new(),
        coefficients: Vec::new(),
        support: support_of(b, spec.n_unpenalized()),
        lambda,
        gamma,
        penalty_weights: weights.to_vec(),
        eric_trace: Vec::new(),
        refit: false,
        warnings,
        objective_path,
    };
    let (ints, coefs) = fit.from_layout(b, p);
    fit.intercepts = ints;
    fit.coefficients = coefs;
    fit
}

/// Adaptive LASSO at a single penalty level, from a cold start.
///
/// Slope `j` carries penalty `λ|b_j|/weights[j]`; a zero weight forces the slope to zero.
/// The intercept (and the outcome model's treatment main effect) is unpenalized.
pub fn fit_adaptive_lasso(
    d: &Dataset,
    spec: &ModelSpec,
    weights: &[f64],
    gamma: f64,
    lambda: f64,
    opts: &GlmOptions,
    obs_weights: Option<&[f64]>,
) -> Result<GlmFit> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    check_penalty_weights(spec, d, weights)?;
    let design = Design::new(d, spec)?;
    let w = unit_or(obs_weights, d.n());
    let solver = Solver::new(&design, &w, opts)?;
    let pf = penalty_factors(design.n_unpen, weights, lambda);
    let sol = solver.solve(&pf, solver.null_start());
    let mut warnings = Vec::new();
    let (b, path) = if sol.converged && sol.b.iter().all(|v| v.is_finite()) {
        (sol.b, sol.objective_path)
    } else {
        // divergent working weights: stabilize with a tiny ridge term
        warnings.push(format!("adaptive LASSO did not converge at lambda={lambda:e}; refitted with ridge stabilization"));
        let ridge = vec![1e-6; design.m()];
        let mut b = solver.null_start();
        let eta = design.eta(&b);
        let all: Vec<usize> = (0..design.m()).collect();
        let (a, c) = design.quadratic(&all, &eta, &w, solver.wsum);
        cd_quadratic(&a, &c, &pf, &ridge, &mut b, opts.tol, opts.max_sweeps, |_| {});
        (b, sol.objective_path)
    };
    if design.family == Family::Binomial {
        let eta = design.eta(&b);
        if eta.iter().any(|e| e.abs() > 30.0) {
            warnings.push("fitted probabilities numerically 0 or 1 for some observations".into());
        }
    }
    Ok(assemble(spec, d.p(), &b, lambda, gamma, weights, path, warnings))
}

/// Smallest penalty level at which every penalized slope is zero, inflated by a relative
/// 1e-6 so that solver round-off cannot leave a spurious nonzero slope at the top of the grid.
pub fn lambda_max(d: &Dataset, spec: &ModelSpec, weights: &[f64], obs_weights: Option<&[f64]>) -> Result<f64> {
    check_penalty_weights(spec, d, weights)?;
    let design = Design::new(d, spec)?;
    let w = unit_or(obs_weights, d.n());
    let solver = Solver::new(&design, &w, &GlmOptions::default())?;
    let unpen: Vec<usize> = (0..design.n_unpen).collect();
    let (b, _, _) = solver.newton(&unpen, 0.0)?;
    let eta = design.eta(&b);
    let g = design.gradient(&eta, &w, solver.wsum);
    Ok(g[design.n_unpen..]
        .iter()
        .zip(weights)
        .map(|(gj, wj)| gj.abs() * wj)
        .fold(0.0, f64::max)
        * (1.0 + 1e-6))
}

/// `count` log-spaced values from `lambda_max` down to `lambda_max · min_ratio`.
pub fn lambda_grid(lambda_max: f64, count: usize, min_ratio: f64) -> Vec<f64> {
    if count <= 1 {
        return vec![lambda_max];
    }
    let lo = min_ratio.ln();
    (0..count)
        .map(|i| lambda_max * (lo * i as f64 / (count - 1) as f64).exp())
        .collect()
}

fn criterion_value(criterion: Criterion, loglik: f64, dispersion: f64, support: usize, n: usize, lambda: f64) -> f64 {
    let s = support as f64;
    let n = n as f64;
    match criterion {
        Criterion::Eric { nu } => -2.0 * loglik + nu * s * (n * dispersion / lambda).ln(),
        Criterion::Bic => -2.0 * loglik + s * n.ln(),
    }
}

/// Evaluates the criterion at every grid point (serial, warm-started) and returns the minimizer.
///
/// Each criterion value uses the log-likelihood of the unpenalized refit on the support
/// selected at that penalty level.
pub fn select_lambda(
    d: &Dataset,
    spec: &ModelSpec,
    weights: &[f64],
    grid: &[f64],
    opts: &GlmOptions,
    obs_weights: Option<&[f64]>,
) -> Result<(f64, Vec<TracePoint>)> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::Config("lambda grid values must be positive and finite".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("lambda grid must be strictly decreasing".into()));
    }
    check_penalty_weights(spec, d, weights)?;
    let design = Design::new(d, spec)?;
    let w = unit_or(obs_weights, d.n());
    let solver = Solver::new(&design, &w, opts)?;
    let u = design.n_unpen;

    let mut cache: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
    let mut trace = Vec::with_capacity(grid.len());
    let mut b = solver.null_start();
    for &lambda in grid {
        let pf = penalty_factors(u, weights, lambda);
        b = solver.solve(&pf, b).b;
        let support = support_of(&b, u);
        let (ll, disp) = match cache.get(&support) {
            Some(v) => *v,
            None => {
                let active: Vec<usize> = (0..u).chain(support.iter().map(|j| j + u)).collect();
                let refit = solver.newton(&active, 0.0).or_else(|_| solver.newton(&active, 1e-6))?;
                let eta = design.eta(&refit.0);
                let v = design.loglik(&eta, &w, solver.wsum);
                cache.insert(support.clone(), v);
                v
            }
        };
        trace.push(TracePoint {
            lambda,
            criterion: criterion_value(opts.criterion, ll, disp, support.len(), d.n(), lambda),
            support_size: support.len(),
        });
    }
    let best = trace
        .iter()
        .min_by(|a, b| a.criterion.total_cmp(&b.criterion))
        .expect("non-empty grid");
    Ok((best.lambda, trace))
}

/// Unpenalized MLE restricted to `fit.support`; off-support slopes are exactly zero.
///
/// If the restricted logistic fit separates (or the gram matrix is singular) the refit
/// falls back to a ridge penalty of 1e-6 and records a warning.
pub fn refit_on_support(d: &Dataset, fit: &GlmFit, obs_weights: Option<&[f64]>) -> Result<GlmFit> {
    let design = Design::new(d, &fit.spec)?;
    let w = unit_or(obs_weights, d.n());
    let solver = Solver::new(&design, &w, &GlmOptions::default())?;
    let u = design.n_unpen;
    let active: Vec<usize> = (0..u).chain(fit.support.iter().map(|j| j + u)).collect();
    let mut warnings = fit.warnings.clone();
    let b = match solver.newton(&active, 0.0) {
        Ok((b, _, _)) => b,
        Err(_) => {
            warnings.push("unpenalized refit failed (separation or collinearity); used ridge 1e-6".into());
            solver.newton(&active, 1e-6)?.0
        }
    };
    let mut out = assemble(&fit.spec, d.p(), &b, fit.lambda, fit.gamma, &fit.penalty_weights, Vec::new(), warnings);
    out.support = fit.support.clone();
    out.eric_trace = fit.eric_trace.clone();
    out.refit = true;
    Ok(out)
}

/// Gradient of the weighted mean loss at `fit`, over the full coefficient layout.
pub fn loss_gradient(d: &Dataset, fit: &GlmFit, obs_weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let design = Design::new(d, &fit.spec)?;
    let w = unit_or(obs_weights, d.n());
    let wsum = check_weights(&w, d.n())?;
    let eta = design.eta(&fit.layout());
    Ok(design.gradient(&eta, &w, wsum))
}

/// Largest violation of the adaptive-LASSO stationarity conditions at `fit`.
///
/// Unpenalized terms must have zero gradient; nonzero slopes must satisfy
/// `g_j + λ·sign(b_j)/weight_j = 0`; zero slopes must satisfy `|g_j| ≤ λ/weight_j`.
pub fn kkt_violation(d: &Dataset, fit: &GlmFit, obs_weights: Option<&[f64]>) -> Result<f64> {
    let g = loss_gradient(d, fit, obs_weights)?;
    let b = fit.layout();
    let u = fit.spec.n_unpenalized();
    let mut worst = 0.0_f64;
    for j in 0..b.len() {
        let v = if j < u {
            g[j].abs()
        } else {
            let wj = fit.penalty_weights[j - u];
            if wj == 0.0 {
                0.0
            } else {
                let pen = fit.lambda / wj;
                if b[j] != 0.0 {
                    (g[j] + pen * b[j].signum()).abs()
                } else {
                    (g[j].abs() - pen).max(0.0)
                }
            }
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

/// The full working-model pipeline: ridge initial weights, penalty tuning (unless
/// `fixed_lambda` is given), a cold-start adaptive LASSO fit, and a refit on its support.
pub fn fit_working_model(
    d: &Dataset,
    spec: &ModelSpec,
    opts: &GlmOptions,
    fixed_lambda: Option<f64>,
    obs_weights: Option<&[f64]>,
) -> Result<GlmFit> {
    let ridge_lambda = opts.ridge_lambda.unwrap_or(1.0 / d.n() as f64);
    let ridge = fit_ridge(d, spec, ridge_lambda, obs_weights)?;
    let weights = adaptive_weights(&ridge.slopes, opts.gamma);
    let (lambda, trace) = match fixed_lambda {
        Some(l) => (l, Vec::new()),
        None => {
            let lmax = lambda_max(d, spec, &weights, obs_weights)?;
            if lmax > 0.0 {
                let grid = lambda_grid(lmax, opts.n_lambda, opts.lambda_min_ratio);
                select_lambda(d, spec, &weights, &grid, opts, obs_weights)?
            } else {
                (0.0, Vec::new())
            }
        }
    };
    let fit = fit_adaptive_lasso(d, spec, &weights, opts.gamma, lambda, opts, obs_weights)?;
    let mut refit = refit_on_support(d, &fit, obs_weights)?;
    refit.eric_trace = trace;
    Ok(refit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(y: Vec<f64>, t: Vec<u8>, cols: &[Vec<f64>]) -> Dataset {
        let n = y.len();
        let x = DMatrix::from_iterator(n, cols.len(), cols.iter().flatten().copied());
        let names = (0..cols.len()).map(|j| format!("x{j}")).collect();
        Dataset::new(y, t, x, names).unwrap()
    }

    // single centered covariate with x'x/n = 1 and x'y/n = 0.5; the centered treatment
    // column is orthogonal to both x and y, so the scalar closed forms apply
    fn scalar_gaussian() -> Dataset {
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let y = vec![1.0, -1.0, 0.0, 0.0];
        data(y, vec![1, 1, 0, 0], &[x])
    }

    fn gaussian() -> ModelSpec {
        ModelSpec::outcome(Family::Gaussian)
    }

    #[test]
    fn ridge_scalar_closed_form() {
        let d = scalar_gaussian();
        let fit = fit_ridge(&d, &gaussian(), 1.0, None).unwrap();
        assert!((fit.slopes[0] - 0.25).abs() < 1e-12, "{:?}", fit.slopes);
    }

    #[test]
    fn huge_ridge_shrinks_to_logit_of_mean() {
        let x = vec![0.3, -1.2, 0.5, 2.0, -0.1, 0.9];
        let t = vec![1, 0, 0, 1, 1, 1];
        let d = data(vec![0.0; 6], t, &[x]);
        let fit = fit_ridge(&d, &ModelSpec::propensity(), 1e9, None).unwrap();
        assert!(fit.slopes[0].abs() < 1e-8);
        let pbar: f64 = 4.0 / 6.0;
        assert!((fit.intercepts[0] - (pbar / (1.0 - pbar)).ln()).abs() < 1e-8);
    }

    #[test]
    fn ridge_is_finite_under_separation() {
        let x = vec![-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let d = data(vec![0.0; 6], vec![0, 0, 0, 1, 1, 1], &[x]);
        let fit = fit_ridge(&d, &ModelSpec::propensity(), 0.1, None).unwrap();
        assert!(fit.slopes[0].is_finite() && fit.slopes[0] > 0.0);
    }

    #[test]
    fn soft_threshold_on_scalar_design() {
        let d = scalar_gaussian();
        let fit = fit_adaptive_lasso(&d, &gaussian(), &[1.0], 1.0, 0.2, &GlmOptions::default(), None)
            .unwrap();
        assert!((fit.coefficients[0][0] - 0.3).abs() < 1e-12);
        let fit = fit_adaptive_lasso(&d, &gaussian(), &[1.0], 1.0, 0.6, &GlmOptions::default(), None)
            .unwrap();
        assert_eq!(fit.coefficients[0][0], 0.0);
        assert!(fit.support.is_empty());
    }

    #[test]
    fn zero_weight_forces_zero() {
        let d = scalar_gaussian();
        let fit = fit_adaptive_lasso(&d, &gaussian(), &[0.0], 1.0, 1e-6, &GlmOptions::default(), None)
            .unwrap();
        assert_eq!(fit.coefficients[0][0], 0.0);
    }

    #[test]
    fn single_point_grid_returns_that_value() {
        let d = scalar_gaussian();
        let (l, trace) =
            select_lambda(&d, &gaussian(), &[1.0], &[0.1], &GlmOptions::default(), None).unwrap();
        assert_eq!(l, 0.1);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn grid_must_decrease() {
        let d = scalar_gaussian();
        let r = select_lambda(&d, &gaussian(), &[1.0], &[0.1, 0.2], &GlmOptions::default(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn lambda_grid_endpoints() {
        let g = lambda_grid(2.0, 50, 1e-4);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 2.0);
        assert!((g[49] - 2e-4).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn binomial_response_is_checked() {
        let d = scalar_gaussian();
        let spec = ModelSpec::outcome(Family::Binomial);
        assert!(matches!(fit_ridge(&d, &spec, 1.0, None), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_support_gaussian_refit_is_mean() {
        // equal arm means, so the intercept equals the overall mean
        let d = data(vec![1.0, 2.0, 4.0, 5.0], vec![0, 1, 1, 0], &[vec![0.1, 0.4, -0.3, 0.8]]);
        let spec = gaussian();
        let fit = fit_adaptive_lasso(&d, &spec, &[1.0], 1.0, 1e6, &GlmOptions::default(), None).unwrap();
        let refit = refit_on_support(&d, &fit, None).unwrap();
        assert!((refit.intercepts[0] - 3.0).abs() < 1e-12);
        assert!(refit.intercepts[1].abs() < 1e-12);
        assert_eq!(refit.coefficients[0], [0.0]);
    }
}
