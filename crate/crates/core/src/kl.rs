//! KL projection of a target treatment law onto the attainable set by
//! EM over a HAL-logistic instrument policy, treating `Z` as missing.
//!
//! Pseudo-treatments `A*_i ~ g*(.|W_i)` are drawn once. With
//! `pi_i = h(1|W_i)` the E-step computes
//! `tau_i = p(A*_i|1,W_i) pi_i / (p(A*_i|0,W_i)(1 - pi_i) + p(A*_i|1,W_i) pi_i)`
//! and the M-step maximizes the fractional-label likelihood
//! `sum tau log pi + (1 - tau) log(1 - pi) - lambda ||beta||_1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::hal::{self, FitOptions, HalBasis, HalFit, Link, SparseDesign};
use crate::induced::{InducedMarginal, InstrumentPolicy};
use crate::math::{expit, gaussian_pdf, mean};
use crate::nuisance::{ConditionalKernel, HalOptions};
use crate::rng;

/// Desired treatment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatmentTarget {
    /// `g*(a|w)` for a binary treatment.
    Binary(InducedMarginal),
    /// Unconditional `N(mean, sd^2)` for a continuous treatment.
    Gaussian { mean: f64, sd: f64 },
}

impl TreatmentTarget {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Binary(marginal) => marginal.validate(),
            Self::Gaussian { mean, sd } => {
                if !(mean.is_finite() && sd.is_finite() && *sd > 0.0) {
                    return Err(validation("Gaussian target needs a finite mean and sd > 0"));
                }
                Ok(())
            }
        }
    }

    /// Density (or mass) of `a` given full covariates `w`.
    pub fn density(&self, a: f64, w: &[f64]) -> Result<f64> {
        match self {
            Self::Binary(marginal) => {
                let p = marginal.p1(w)?;
                Ok(if a == 1.0 {
                    p
                } else if a == 0.0 {
                    1.0 - p
                } else {
                    0.0
                })
            }
            Self::Gaussian { mean, sd } => Ok(gaussian_pdf(a, *mean, *sd)),
        }
    }
}

/// Conditional law `p(a|z,w)` of the treatment, evaluated at pseudo-treatments.
pub trait TreatmentDensity: Sync {
    fn density(&self, a: f64, z: f64, w: &[f64]) -> Result<f64>;
}

impl TreatmentDensity for ConditionalKernel {
    fn density(&self, a: f64, z: f64, w: &[f64]) -> Result<f64> {
        self.prob(a, z, w)
    }
}

/// `A | Z, W ~ N(gamma z + shift(W), sigma^2)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianKernel {
    pub gamma: f64,
    pub sigma: f64,
    pub shift: fn(&[f64]) -> f64,
}

impl TreatmentDensity for GaussianKernel {
    fn density(&self, a: f64, z: f64, w: &[f64]) -> Result<f64> {
        Ok(gaussian_pdf(a, self.gamma * z + (self.shift)(w), self.sigma))
    }
}

/// `sin(w_1) log(1 + w_2^2)`.
pub fn sin_log_shift(w: &[f64]) -> f64 {
    w[0].sin() * (1.0 + w[1] * w[1]).ln()
}

/// One `A*_i` for each of the `n` rows of the row-major covariates `w`,
/// deterministic in `seed`.
pub fn sample_pseudo_treatments(
    target: &TreatmentTarget,
    w: &[f64],
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    target.validate()?;
    if w.len() != n * dim {
        return Err(validation(format!("expected {n} rows of {dim} covariates")));
    }
    let mut r = rng::stream(seed, 1);
    (0..n)
        .map(|i| match target {
            TreatmentTarget::Binary(marginal) => {
                let p = marginal.p1(&w[i * dim..(i + 1) * dim])?;
                Ok(if r.random::<f64>() < p { 1.0 } else { 0.0 })
            }
            TreatmentTarget::Gaussian { mean, sd } => {
                let e: f64 = r.sample(StandardNormal);
                Ok(mean + sd * e)
            }
        })
        .collect()
}

/// Likelihood of each pseudo-treatment under `z = 0` and `z = 1`.
fn likelihoods(kernel: &dyn TreatmentDensity, a_star: &[f64], w: &[f64], dim: usize) -> Result<Vec<[f64; 2]>> {
    (0..a_star.len())
        .map(|i| {
            let wi = &w[i * dim..(i + 1) * dim];
            Ok([kernel.density(a_star[i], 0.0, wi)?, kernel.density(a_star[i], 1.0, wi)?])
        })
        .collect()
}

fn posterior(lik: &[[f64; 2]], prior: &[f64]) -> Result<Vec<f64>> {
    lik.iter()
        .zip(prior)
        .enumerate()
        .map(|(i, (l, p))| {
            let num = l[1] * p;
            let den = l[0] * (1.0 - p) + num;
            if !(den > 0.0) {
                return Err(validation(format!(
                    "E-step denominator is zero at row {i} (the pseudo-treatment has no likelihood under either instrument value)"
                )));
            }
            Ok(num / den)
        })
        .collect()
}

fn observed_loglik(lik: &[[f64; 2]], prior: &[f64]) -> f64 {
    lik.iter()
        .zip(prior)
        .map(|(l, p)| (l[0] * (1.0 - p) + l[1] * p).ln())
        .sum()
}

/// Posterior `P(Z = 1 | A*_i, W_i)` under policy `h_k`.
pub fn em_e_step(
    h_k: &InstrumentPolicy,
    kernel: &dyn TreatmentDensity,
    a_star: &[f64],
    w: &[f64],
    dim: usize,
) -> Result<Vec<f64>> {
    if w.len() != a_star.len() * dim {
        return Err(validation("pseudo-treatments and covariates disagree in length"));
    }
    let prior = (0..a_star.len())
        .map(|i| h_k.p1(&w[i * dim..(i + 1) * dim]))
        .collect::<Result<Vec<_>>>()?;
    posterior(&likelihoods(kernel, a_star, w, dim)?, &prior)
}

/// Fractional-label M-step via the duplication trick, optionally warm-started.
pub fn em_m_step_design(
    x: &SparseDesign,
    tau: &[f64],
    lambda: f64,
    warm: Option<(f64, &[f64])>,
) -> Result<HalFit> {
    let (x2, y2, w2) = hal::duplicate_for_fractional(x, tau)?;
    hal::fit_weighted_l1_with(&x2, &y2, &w2, lambda, Link::Logit, &FitOptions::default(), warm)
}

/// M-step on the basis evaluated at `w`.
pub fn em_m_step(tau: &[f64], basis: &HalBasis, w: &[f64], lambda: f64) -> Result<HalFit> {
    let x = design_for(basis, w, tau.len())?;
    em_m_step_design(&x, tau, lambda, None)
}

fn design_for(basis: &HalBasis, w: &[f64], n: usize) -> Result<SparseDesign> {
    if basis.dim == 0 {
        return Ok(SparseDesign { n_rows: n, cols: Vec::new() });
    }
    let x = basis.design(w, basis.dim)?;
    if x.n_rows != n {
        return Err(validation("basis rows and posteriors disagree in length"));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlConfig {
    /// Fixed penalty; chosen by grouped cross-validation on the initial
    /// posteriors when absent.
    pub lambda: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub ascent_tol: f64,
    pub seed: u64,
    pub hal: HalOptions,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            max_iter: 200,
            tol: 1e-6,
            ascent_tol: 1e-8,
            seed: 1,
            hal: HalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub lambda: f64,
    /// Posteriors under the final policy.
    pub tau: Vec<f64>,
    /// Penalized observed-data log-likelihood, starting at the initial policy.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProjection {
    pub policy: InstrumentPolicy,
    pub state: EmState,
    pub a_star: Vec<f64>,
    /// `h(1|W_i)` of the final policy per row.
    pub prior_p1: Vec<f64>,
}

/// EM-HAL with pseudo-treatments drawn from `target` at `config.seed`.
pub fn kl_project(
    target: &TreatmentTarget,
    kernel: &dyn TreatmentDensity,
    w: &[f64],
    dim: usize,
    n: usize,
    config: &KlConfig,
) -> Result<KlProjection> {
    if w.len() != n * dim {
        return Err(validation(format!("expected {n} rows of {dim} covariates")));
    }
    let a_star = sample_pseudo_treatments(target, w, dim, n, config.seed)?;
    kl_project_with(&a_star, kernel, w, dim, config)
}

/// EM-HAL on given pseudo-treatments.
pub fn kl_project_with(
    a_star: &[f64],
    kernel: &dyn TreatmentDensity,
    w: &[f64],
    dim: usize,
    config: &KlConfig,
) -> Result<KlProjection> {
    let n = a_star.len();
    if n == 0 {
        return Err(validation("no pseudo-treatments"));
    }
    if w.len() != n * dim {
        return Err(validation("pseudo-treatments and covariates disagree in length"));
    }
    let basis = if dim == 0 {
        hal::build_basis(&[], 0, 1, 0)?
    } else {
        hal::build_basis(w, dim, config.hal.max_degree, config.hal.max_knots_per_dim)?
    };
    let x = design_for(&basis, w, n)?;
    let lik = likelihoods(kernel, a_star, w, dim)?;

    let mut intercept = 0.0;
    let mut beta = vec![0.0; basis.len()];
    let mut prior = vec![0.5; n];
    let mut tau = posterior(&lik, &prior)?;

    let lambda = match config.lambda {
        Some(l) => l,
        None => {
            let (x2, y2, w2) = hal::duplicate_for_fractional(&x, &tau)?;
            let grid = hal::lambda_grid(&x2, &y2, &w2, Link::Logit, config.hal.grid_len, config.hal.min_ratio)?;
            let groups: Vec<usize> = (0..2 * n).map(|r| r / 2).collect();
            hal::cross_validate_lambda_grouped(&x2, &y2, &w2, Link::Logit, config.hal.folds, &grid, &groups)?
        }
    };
    let penalized = |ll: f64, beta: &[f64]| ll - lambda * beta.iter().map(|b| b.abs()).sum::<f64>();

    let mut trace = vec![penalized(observed_loglik(&lik, &prior), &beta)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let fit = em_m_step_design(&x, &tau, lambda, Some((intercept, &beta)))?;
        intercept = fit.intercept;
        beta = fit.beta;
        prior = x.linear_predictor(intercept, &beta).into_iter().map(expit).collect();
        tau = posterior(&lik, &prior)?;
        iterations += 1;
        let value = penalized(observed_loglik(&lik, &prior), &beta);
        let last = *trace.last().expect("trace starts non-empty");
        trace.push(value);
        if value < last - config.ascent_tol {
            return Err(Error::Invariant(format!(
                "EM log-likelihood decreased from {last} to {value} at iteration {iterations}"
            )));
        }
        if (value - last).abs() < config.tol {
            converged = true;
            break;
        }
    }

    let fit = HalFit {
        intercept,
        beta: beta.clone(),
        lambda,
        link: Link::Logit,
        objective_trace: Vec::new(),
        sweeps: 0,
        converged,
    };
    Ok(KlProjection {
        policy: InstrumentPolicy::BasisLogistic { basis, fit },
        state: EmState {
            intercept,
            beta,
            lambda,
            tau,
            loglik_trace: trace,
            iterations,
            converged,
        },
        a_star: a_star.to_vec(),
        prior_p1: prior,
    })
}

/// Density of the treatment implied by `h(1|W_i) = prior_p1[i]`, averaged over rows.
pub fn implied_density(kernel: &dyn TreatmentDensity, w: &[f64], dim: usize, prior_p1: &[f64], a: f64) -> Result<f64> {
    let mut total = 0.0;
    for (i, p) in prior_p1.iter().enumerate() {
        let wi = &w[i * dim..(i + 1) * dim];
        total += kernel.density(a, 0.0, wi)? * (1.0 - p) + kernel.density(a, 1.0, wi)? * p;
    }
    Ok(total / prior_p1.len() as f64)
}

/// `KL(target || implied)`. Binary targets are summed exactly per row and
/// averaged over rows; Gaussian targets use `m` draws from the target
/// against the row-averaged implied mixture.
pub fn kl_divergence(
    target: &TreatmentTarget,
    kernel: &dyn TreatmentDensity,
    w: &[f64],
    dim: usize,
    prior_p1: &[f64],
    m: usize,
    seed: u64,
) -> Result<f64> {
    target.validate()?;
    if prior_p1.is_empty() || w.len() != prior_p1.len() * dim {
        return Err(validation("policy probabilities and covariates disagree in length"));
    }
    match target {
        TreatmentTarget::Binary(_) => {
            let mut total = 0.0;
            for (i, p) in prior_p1.iter().enumerate() {
                let wi = &w[i * dim..(i + 1) * dim];
                for a in [0.0, 1.0] {
                    let t = target.density(a, wi)?;
                    if t == 0.0 {
                        continue;
                    }
                    let g = kernel.density(a, 0.0, wi)? * (1.0 - p) + kernel.density(a, 1.0, wi)? * p;
                    total += t * (t / g).ln();
                }
            }
            Ok(total / prior_p1.len() as f64)
        }
        TreatmentTarget::Gaussian { mean: mu, sd } => {
            if m == 0 {
                return Err(validation("Monte Carlo KL needs at least one draw"));
            }
            let mut r = rng::stream(seed, 2);
            let mut terms = Vec::with_capacity(m);
            for _ in 0..m {
                let e: f64 = r.sample(StandardNormal);
                let a = mu + sd * e;
                let g = implied_density(kernel, w, dim, prior_p1, a)?;
                terms.push((gaussian_pdf(a, *mu, *sd) / g).ln());
            }
            Ok(mean(&terms))
        }
    }
}

/// The continuous-treatment simulation: `W ~ U[-2, 2]^2`,
/// natural `P(Z = 1 | W) = expit(w_1 sqrt|w_2| sign(w_2))`,
/// `A | Z, W ~ N(gamma Z + sin(w_1) log(1 + w_2^2), sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianTreatmentSetting {
    pub gamma: f64,
    pub sigma: f64,
}

impl Default for GaussianTreatmentSetting {
    fn default() -> Self {
        Self { gamma: 2.0, sigma: 0.2 }
    }
}

impl GaussianTreatmentSetting {
    pub fn kernel(&self) -> GaussianKernel {
        GaussianKernel {
            gamma: self.gamma,
            sigma: self.sigma,
            shift: sin_log_shift,
        }
    }

    /// `n` covariate rows (row-major, two columns).
    pub fn covariates(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0);
        (0..2 * n).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    pub fn natural_p1(&self, w: &[f64]) -> f64 {
        expit(w[0] * w[1].abs().sqrt() * w[1].signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::StratifiedTable;

    struct Fixed([f64; 2]);
    impl TreatmentDensity for Fixed {
        fn density(&self, _a: f64, z: f64, _w: &[f64]) -> Result<f64> {
            Ok(self.0[z as usize])
        }
    }

    fn constant_policy(p: f64) -> InstrumentPolicy {
        InstrumentPolicy::constant(vec![0.0, 1.0], vec![1.0 - p, p]).unwrap()
    }

    #[test]
    fn e_step_hand_values() {
        let w = [0.0];
        let tau = em_e_step(&constant_policy(0.5), &Fixed([0.2, 0.8]), &[1.0], &w, 1).unwrap();
        assert!((tau[0] - 0.8).abs() < 1e-15);
        let tau = em_e_step(&constant_policy(0.3), &Fixed([0.4, 0.4]), &[1.0], &w, 1).unwrap();
        assert!((tau[0] - 0.3).abs() < 1e-15);
        let tau = em_e_step(&constant_policy(1.0), &Fixed([0.4, 0.7]), &[1.0], &w, 1).unwrap();
        assert_eq!(tau[0], 1.0);
        assert!(em_e_step(&constant_policy(0.5), &Fixed([0.0, 0.0]), &[1.0], &w, 1).is_err());
    }

    #[test]
    fn m_step_constant_posterior() {
        let basis = hal::build_basis(&[], 0, 1, 0).unwrap();
        let fit = em_m_step(&[0.3; 10], &basis, &[], 0.0).unwrap();
        assert!((expit(fit.intercept) - 0.3).abs() < 1e-8);
    }

    #[test]
    fn m_step_full_shrinkage() {
        let w: Vec<f64> = (0..40).map(|i| (i % 4) as f64).collect();
        let tau: Vec<f64> = w.iter().map(|v| 0.1 + 0.2 * v).collect();
        let basis = hal::build_basis(&w, 1, 1, 50).unwrap();
        let fit = em_m_step(&tau, &basis, &w, 1e6).unwrap();
        assert!(fit.beta.iter().all(|b| *b == 0.0));
        assert!((expit(fit.intercept) - mean(&tau)).abs() < 1e-8);
    }

    #[test]
    fn degenerate_binary_target_samples_ones() {
        let g = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).unwrap();
        let w = [0.0, 1.0, 1.0, 0.0];
        let a = sample_pseudo_treatments(&TreatmentTarget::Binary(g), &w, 1, 4, 3).unwrap();
        assert!(a.iter().all(|a| *a == 1.0));
    }

    #[test]
    fn attainable_target_is_a_fixed_point() {
        // Kernel strong in z; target induced by h = 0.5, the initial policy.
        let kernel = ConditionalKernel::tabular(StratifiedTable::constant(vec![0.0, 1.0], vec![0.2, 0.8]).unwrap());
        let n = 4000;
        let a: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let out = kl_project_with(&a, &kernel, &[], 0, &KlConfig::default()).unwrap();
        assert!((out.prior_p1[0] - 0.5).abs() < 0.02);
        assert!(out.state.converged);
    }
}
