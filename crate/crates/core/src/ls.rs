//! Least-squares projection onto the attainable set `{B h : h in simplex}`
//! by projected gradient descent, plus the exponential-tilt approximation
//! of a location shift for Gaussian instrument laws.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::induced::BMatrix;
use crate::math::gaussian_pdf;

const SIMPLEX_TOL: f64 = 1e-9;

fn check_len(what: &str, v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(validation(format!("{what} has {} entries, expected {want}", v.len())));
    }
    Ok(())
}

fn residual(b: &BMatrix, g_star: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    check_len("target", g_star, b.n_treatment())?;
    let bh = b.apply(h)?;
    Ok(g_star.iter().zip(&bh).map(|(g, v)| g - v).collect())
}

/// `sum_a weights(a) (g*(a) - (B h)(a))^2`; uniform unit weights when `None`.
pub fn ls_risk(b: &BMatrix, g_star: &[f64], h: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    let r = residual(b, g_star, h)?;
    match weights {
        None => Ok(r.iter().map(|e| e * e).sum()),
        Some(w) => {
            check_len("weights", w, r.len())?;
            Ok(r.iter().zip(w).map(|(e, w)| w * e * e).sum())
        }
    }
}

/// `-2 B^T (g* - B h)`, the Euclidean gradient of the unweighted risk.
pub fn descent_direction(b: &BMatrix, g_star: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let r = residual(b, g_star, h)?;
    Ok(b.apply_transpose(&r)?.into_iter().map(|v| -2.0 * v).collect())
}

/// The canonical-gradient form `-2 h (B^T (g* - B h))`, with the extra
/// pointwise factor `h`. Exposed for inspection; [`ls_project`] uses
/// [`descent_direction`].
pub fn canonical_direction(b: &BMatrix, g_star: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    Ok(descent_direction(b, g_star, h)?
        .into_iter()
        .zip(h)
        .map(|(d, h)| d * h)
        .collect())
}

/// Euclidean projection onto `{x >= 0, sum x = 1}` by sorting and thresholding.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Normal-equation minimizer of `|g* - B h|^2` over all of `R^q`.
pub fn unconstrained_solution(b: &BMatrix, g_star: &[f64]) -> Result<Vec<f64>> {
    check_len("target", g_star, b.n_treatment())?;
    let m = DMatrix::from_fn(b.n_treatment(), b.n_instrument(), |a, z| b.entries[a][z]);
    let btb = m.transpose() * &m;
    let rhs = m.transpose() * DVector::from_column_slice(g_star);
    let eig = btb.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || eig.eigenvalues.min() <= max * 1e-12 {
        return Err(Error::Singular(
            "B^T B is singular: B is not injective, so the minimizer is not unique \
             (the projection onto the attainable set is still well defined)"
                .into(),
        ));
    }
    let chol = btb
        .cholesky()
        .ok_or_else(|| Error::Singular("B^T B is not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdOptions {
    pub step: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PgdOptions {
    fn default() -> Self {
        Self {
            step: 0.1,
            tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdState {
    pub h: Vec<f64>,
    /// Unweighted risk at the start and after every accepted step.
    pub risk_trace: Vec<f64>,
    /// Step size in force at termination.
    pub step: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_simplex(h: &[f64]) -> Result<()> {
    if h.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) || (h.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
        return Err(validation(format!("{h:?} is not on the probability simplex")));
    }
    Ok(())
}

/// Projected gradient descent from `h0`. A step that raises the risk is
/// retried with half the step size. Stops once successive iterates are
/// within `tol` or after `max_iter` steps; the latter is reported through
/// `converged = false`. Returns the final state and `B h_final`.
pub fn ls_project(b: &BMatrix, g_star: &[f64], h0: &[f64], opts: &PgdOptions) -> Result<(PgdState, Vec<f64>)> {
    check_len("initial policy", h0, b.n_instrument())?;
    check_simplex(h0)?;
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(validation("step size must be positive"));
    }
    let mut h = project_simplex(h0);
    let mut t = opts.step;
    let mut risk = ls_risk(b, g_star, &h, None)?;
    let mut trace = vec![risk];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let d = descent_direction(b, g_star, &h)?;
        let (cand, cand_risk) = loop {
            let c = project_simplex(&h.iter().zip(&d).map(|(h, d)| h - t * d).collect::<Vec<_>>());
            let r = ls_risk(b, g_star, &c, None)?;
            if r <= risk || t < 1e-300 {
                break (c, r);
            }
            t *= 0.5;
        };
        iterations += 1;
        let moved = cand.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        h = cand;
        risk = cand_risk;
        trace.push(risk);
        if moved <= opts.tol {
            converged = true;
            break;
        }
    }
    let implied = b.apply(&h)?;
    Ok((
        PgdState {
            h,
            risk_trace: trace,
            step: t,
            iterations,
            converged,
        },
        implied,
    ))
}

/// Runs [`ls_project`] independently on each covariate stratum.
pub fn ls_project_strata(
    bs: &[BMatrix],
    g_stars: &[Vec<f64>],
    h0s: &[Vec<f64>],
    opts: &PgdOptions,
) -> Result<Vec<(PgdState, Vec<f64>)>> {
    if bs.len() != g_stars.len() || bs.len() != h0s.len() {
        return Err(validation("per-stratum inputs disagree in length"));
    }
    bs.par_iter()
        .zip(g_stars)
        .zip(h0s)
        .map(|((b, g), h)| ls_project(b, g, h, opts))
        .collect()
}

/// Exponential tilt of a Gaussian instrument law `N(mu, sigma^2)` towards a
/// location shift by `beta`.
///
/// With score `psi(z) = -(z - mu)/sigma^2`, the first-order tilt is
/// `exp(beta psi(z)) h(z)` and the exact ratio is
/// `exp(-beta (z - mu)/sigma^2 - beta^2/(2 sigma^2)) = h(z + beta)/h(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltPolicy {
    pub beta: f64,
    pub mu: f64,
    pub sigma: f64,
}

pub fn gaussian_tilt_policy(beta: f64, mu: f64, sigma: f64) -> Result<TiltPolicy> {
    if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite() && beta.is_finite()) {
        return Err(validation("tilt needs finite beta, mu and sigma > 0"));
    }
    Ok(TiltPolicy { beta, mu, sigma })
}

impl TiltPolicy {
    pub fn score(&self, z: f64) -> f64 {
        -(z - self.mu) / (self.sigma * self.sigma)
    }

    pub fn natural_density(&self, z: f64) -> f64 {
        gaussian_pdf(z, self.mu, self.sigma)
    }

    pub fn first_order_ratio(&self, z: f64) -> f64 {
        (self.beta * self.score(z)).exp()
    }

    /// First-order tilt with normalizer 1.
    pub fn first_order_density(&self, z: f64) -> f64 {
        self.first_order_ratio(z) * self.natural_density(z)
    }

    pub fn exact_ratio(&self, z: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (-self.beta * (z - self.mu) / s2 - self.beta * self.beta / (2.0 * s2)).exp()
    }

    pub fn exact_density(&self, z: f64) -> f64 {
        self.exact_ratio(z) * self.natural_density(z)
    }

    /// Closed-form normalizer `C` with `C int exp(beta psi) h = 1`.
    pub fn normalizer(&self) -> f64 {
        (-self.beta * self.beta / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// `max |first-order - exact|` over `points` evenly spaced in `[lo, hi]`.
    pub fn sup_gap(&self, lo: f64, hi: f64, points: usize) -> f64 {
        let steps = points.max(2) - 1;
        (0..=steps)
            .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
            .map(|z| (self.first_order_density(z) - self.exact_density(z)).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> BMatrix {
        BMatrix::from_kernel(&[0.4, 0.6], &[0.5, 0.3]).unwrap()
    }

    #[test]
    fn simplex_projection_cases() {
        assert_eq!(project_simplex(&[0.5, 0.5]), vec![0.5, 0.5]);
        assert_eq!(project_simplex(&[1.5, -0.5]), vec![1.0, 0.0]);
        assert_eq!(project_simplex(&[2.0, 2.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn risk_cases() {
        let b = example();
        assert!((ls_risk(&b, &[0.4, 0.6], &[1.0, 0.0], None).unwrap() - 0.02).abs() < 1e-15);
        let w = [0.62, 0.38];
        assert!((ls_risk(&b, &[0.4, 0.6], &[1.0, 0.0], Some(&w)).unwrap() - 0.01).abs() < 1e-15);
        let bh = b.apply(&[0.3, 0.7]).unwrap();
        let shifted: Vec<f64> = bh.iter().map(|v| v + 0.1).collect();
        assert!((ls_risk(&b, &shifted, &[0.3, 0.7], Some(&w)).unwrap() - 0.01).abs() < 1e-15);
        assert!(ls_risk(&b, &[0.4], &[1.0, 0.0], None).is_err());
    }

    #[test]
    fn direction_pushes_first_coordinate_up() {
        let d = descent_direction(&example(), &[0.4, 0.6], &[0.5, 0.5]).unwrap();
        // B h = (0.6, 0.4); residual (-0.2, 0.2); B^T r = (0, -0.08)
        assert!(d[0].abs() < 1e-15 && (d[1] - 0.16).abs() < 1e-15);
        let c = canonical_direction(&example(), &[0.4, 0.6], &[0.5, 0.5]).unwrap();
        assert!((c[1] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn start_at_optimum() {
        let b = example();
        let h0 = [0.3, 0.7];
        let g = b.apply(&h0).unwrap();
        let (s, _) = ls_project(&b, &g, &h0, &PgdOptions::default()).unwrap();
        assert!(s.converged && s.iterations <= 2);
        assert_eq!(unconstrained_solution(&b, &g).unwrap().len(), 2);
    }

    #[test]
    fn singular_operator_is_reported() {
        let b = BMatrix::from_entries(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(unconstrained_solution(&b, &[0.5, 0.5]), Err(Error::Singular(_))));
    }

    #[test]
    fn tilt_identities() {
        let t = gaussian_tilt_policy(0.0, 0.3, 1.2).unwrap();
        assert_eq!(t.exact_ratio(2.0), 1.0);
        assert_eq!(t.first_order_ratio(-1.0), 1.0);
        let t = gaussian_tilt_policy(0.2, 0.3, 0.5).unwrap();
        assert!((t.exact_ratio(0.3) - (-0.04f64 / 0.5).exp()).abs() < 1e-15);
        // Exact ratio is the shift h(z + beta)/h(z).
        for z in [-1.0, 0.0, 0.7] {
            let want = gaussian_pdf(z + 0.2, 0.3, 0.5) / gaussian_pdf(z, 0.3, 0.5);
            assert!((t.exact_ratio(z) - want).abs() < 1e-12);
        }
        assert!(gaussian_tilt_policy(0.1, 0.0, 0.0).is_err());
    }
}
