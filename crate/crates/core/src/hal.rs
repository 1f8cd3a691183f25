//! Highly Adaptive Lasso sieve.
//!
//! Covariates are expanded into zero-order indicator splines
//! `phi(w) = prod_{s in S} 1{w_s >= knot_s}` over every subset `S` of
//! dimensions up to `max_degree`, with knots taken at observed values.
//! [`fit_weighted_l1`] then fits a weighted L1-penalized GLM over those
//! columns by cyclic coordinate descent. Labels may be fractional, which is
//! what the EM M-step needs; [`duplicate_for_fractional`] provides the
//! equivalent hard-label representation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::math::{expit, log1pexp, logit, soft_threshold};

/// Link function of the penalized GLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// Bernoulli log-likelihood, labels in `[0, 1]`.
    Logit,
    /// Half squared error.
    Identity,
}

/// One indicator column: product of `1{w[dim] >= knot}` over its terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisColumn {
    pub terms: Vec<(usize, f64)>,
}

impl BasisColumn {
    pub fn eval(&self, w: &[f64]) -> f64 {
        if self.terms.iter().all(|&(d, k)| w[d] >= k) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalBasis {
    pub dim: usize,
    pub max_degree: usize,
    /// Per-dimension sorted cut points (the minimum observed value is never a knot).
    pub knots: Vec<Vec<f64>>,
    pub columns: Vec<BasisColumn>,
    /// Number of candidate columns generated before deduplication.
    pub candidate_count: usize,
}

impl HalBasis {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn eval_row(&self, w: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| c.eval(w)).collect()
    }

    /// Design matrix of the basis evaluated at row-major covariates.
    pub fn design(&self, rows: &[f64], dim: usize) -> Result<SparseDesign> {
        if dim != self.dim {
            return Err(validation(format!(
                "basis built for {} covariates, got {dim}",
                self.dim
            )));
        }
        let n = rows.len().checked_div(dim).unwrap_or(0);
        let mut cols = Vec::with_capacity(self.columns.len());
        for c in &self.columns {
            let idx: Vec<u32> = (0..n)
                .filter(|&i| c.eval(&rows[i * dim..(i + 1) * dim]) > 0.0)
                .map(|i| i as u32)
                .collect();
            let val = vec![1.0; idx.len()];
            cols.push(SparseColumn { idx, val });
        }
        Ok(SparseDesign { n_rows: n, cols })
    }

    /// Linear predictor `intercept + sum_j beta_j phi_j(w)`.
    pub fn predictor(&self, fit: &HalFit, w: &[f64]) -> f64 {
        fit.intercept
            + self
                .columns
                .iter()
                .zip(&fit.beta)
                .filter(|(_, b)| **b != 0.0)
                .map(|(c, b)| b * c.eval(w))
                .sum::<f64>()
    }
}

/// Evenly thinned subset of sorted values, always keeping both ends.
fn thin(values: &[f64], max: usize) -> Vec<f64> {
    if values.len() <= max {
        return values.to_vec();
    }
    if max == 0 {
        return Vec::new();
    }
    if max == 1 {
        return vec![values[0]];
    }
    let last = values.len() - 1;
    let mut out: Vec<f64> = (0..max)
        .map(|k| values[(k * last + (max - 1) / 2) / (max - 1)])
        .collect();
    out.dedup();
    out
}

/// Builds the indicator basis from row-major covariates `rows` with `dim` columns.
///
/// Knots are the distinct observed values of each dimension except its
/// minimum, thinned to at most `max_knots_per_dim`. Interaction columns use
/// each observation's values snapped down to the knot grid, so at most
/// `n (2^d - 1)` candidates are generated; columns that are constant or
/// duplicate an earlier column on the data are dropped.
pub fn build_basis(
    rows: &[f64],
    dim: usize,
    max_degree: usize,
    max_knots_per_dim: usize,
) -> Result<HalBasis> {
    if max_degree == 0 {
        return Err(validation("max_degree must be at least 1"));
    }
    if rows.is_empty() && dim > 0 {
        return Err(validation("cannot build a basis from empty data"));
    }
    if dim > 0 && !rows.len().is_multiple_of(dim) {
        return Err(validation("covariate buffer is not a multiple of the dimension"));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(validation("non-finite covariate value"));
    }
    if dim == 0 {
        return Ok(HalBasis {
            dim,
            max_degree,
            knots: Vec::new(),
            columns: Vec::new(),
            candidate_count: 0,
        });
    }
    let n = rows.len() / dim;

    let mut knots = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut vals: Vec<f64> = (0..n).map(|i| rows[i * dim + d]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup();
        let above_min = if vals.is_empty() { &[][..] } else { &vals[1..] };
        knots.push(thin(above_min, max_knots_per_dim));
    }

    let snap = |d: usize, v: f64| -> Option<f64> {
        let ks = &knots[d];
        let pos = ks.partition_point(|k| *k <= v);
        if pos == 0 {
            None
        } else {
            Some(ks[pos - 1])
        }
    };

    let mut subsets: Vec<Vec<usize>> = Vec::new();
    for mask in 1u64..(1u64 << dim) {
        let s: Vec<usize> = (0..dim).filter(|d| mask & (1 << d) != 0).collect();
        if s.len() <= max_degree {
            subsets.push(s);
        }
    }
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));

    let mut candidates: Vec<BasisColumn> = Vec::new();
    for s in &subsets {
        let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
        let mut tuples: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let t: Option<Vec<f64>> = s.iter().map(|&d| snap(d, rows[i * dim + d])).collect();
            if let Some(t) = t {
                let key: Vec<u64> = t.iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    tuples.push(t);
                }
            }
        }
        tuples.sort_by(|a, b| crate::math::cmp_rows(a, b));
        for t in tuples {
            candidates.push(BasisColumn {
                terms: s.iter().copied().zip(t).collect(),
            });
        }
    }
    let candidate_count = candidates.len();

    let mut columns = Vec::new();
    let mut signatures: HashMap<Vec<u32>, ()> = HashMap::new();
    for c in candidates {
        let sig: Vec<u32> = (0..n)
            .filter(|&i| c.eval(&rows[i * dim..(i + 1) * dim]) > 0.0)
            .map(|i| i as u32)
            .collect();
        if sig.is_empty() || sig.len() == n {
            continue;
        }
        if signatures.insert(sig, ()).is_none() {
            columns.push(c);
        }
    }

    Ok(HalBasis {
        dim,
        max_degree,
        knots,
        columns,
        candidate_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseColumn {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

/// Column-compressed design matrix (no intercept column).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDesign {
    pub n_rows: usize,
    pub cols: Vec<SparseColumn>,
}

impl SparseDesign {
    pub fn from_dense_columns(n_rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut cols = Vec::with_capacity(columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != n_rows {
                return Err(validation(format!("column {j} has {} rows, expected {n_rows}", c.len())));
            }
            let mut idx = Vec::new();
            let mut val = Vec::new();
            for (i, &v) in c.iter().enumerate() {
                if v != 0.0 {
                    idx.push(i as u32);
                    val.push(v);
                }
            }
            cols.push(SparseColumn { idx, val });
        }
        Ok(Self { n_rows, cols })
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    /// Restriction to the listed rows, renumbered in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SparseDesign {
        let mut map = vec![u32::MAX; self.n_rows];
        for (new, &old) in rows.iter().enumerate() {
            map[old] = new as u32;
        }
        let cols = self
            .cols
            .iter()
            .map(|c| {
                let mut pairs: Vec<(u32, f64)> = c
                    .idx
                    .iter()
                    .zip(&c.val)
                    .filter(|(i, _)| map[**i as usize] != u32::MAX)
                    .map(|(i, v)| (map[*i as usize], *v))
                    .collect();
                pairs.sort_by_key(|p| p.0);
                SparseColumn {
                    idx: pairs.iter().map(|p| p.0).collect(),
                    val: pairs.iter().map(|p| p.1).collect(),
                }
            })
            .collect();
        SparseDesign {
            n_rows: rows.len(),
            cols,
        }
    }

    pub fn linear_predictor(&self, intercept: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![intercept; self.n_rows];
        for (c, &b) in self.cols.iter().zip(beta) {
            if b != 0.0 {
                for (&i, &v) in c.idx.iter().zip(&c.val) {
                    eta[i as usize] += b * v;
                }
            }
        }
        eta
    }
}

/// Solver controls; defaults are the documented 1e-8 / 10^4 sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalFit {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub link: Link,
    /// Penalized objective after each sweep (minimization form).
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl HalFit {
    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }

    /// Mean response at a linear predictor.
    pub fn mean_at(&self, eta: f64) -> f64 {
        match self.link {
            Link::Logit => expit(eta),
            Link::Identity => eta,
        }
    }

    pub fn predict(&self, x: &SparseDesign) -> Vec<f64> {
        x.linear_predictor(self.intercept, &self.beta)
            .into_iter()
            .map(|e| self.mean_at(e))
            .collect()
    }

    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, b)| (j, *b))
    }
}

fn pointwise_loss(link: Link, y: f64, eta: f64) -> f64 {
    match link {
        Link::Identity => 0.5 * (y - eta) * (y - eta),
        Link::Logit => log1pexp(eta) - y * eta,
    }
}

/// Weighted loss `sum_i w_i l(y_i, eta_i)`.
pub fn weighted_loss(link: Link, y: &[f64], weights: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(weights)
        .zip(eta)
        .filter(|((_, w), _)| **w != 0.0)
        .map(|((y, w), e)| w * pointwise_loss(link, *y, *e))
        .sum()
}

fn validate_inputs(x: &SparseDesign, y: &[f64], weights: &[f64], lambda: f64, link: Link) -> Result<()> {
    if y.len() != x.n_rows || weights.len() != x.n_rows {
        return Err(validation(format!(
            "design has {} rows but y has {} and weights {}",
            x.n_rows,
            y.len(),
            weights.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(validation("lambda must be a finite non-negative number"));
    }
    if y.iter().chain(weights).any(|v| !v.is_finite()) {
        return Err(validation("non-finite response or weight"));
    }
    if x.cols.iter().any(|c| c.val.iter().any(|v| !v.is_finite())) {
        return Err(validation("non-finite design entry"));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(validation("negative weight"));
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(validation("all weights are zero"));
    }
    if link == Link::Logit && y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(validation("logistic responses must lie in [0, 1]"));
    }
    Ok(())
}

/// Weighted L1-penalized GLM by cyclic coordinate descent.
///
/// Minimizes `sum_i w_i l(y_i, b0 + x_i beta) + lambda ||beta||_1` with the
/// intercept unpenalized. Each coordinate takes a proximal Newton step; for
/// the logit link a step that fails to lower the objective is replaced by the
/// majorization step with curvature bound `1/4`, so every sweep is
/// non-increasing. After a full sweep the solver cycles over the active set
/// until it settles, then re-checks all columns. Every few sweeps a
/// sign-preserving Newton step on the active set is tried as well.
pub fn fit_weighted_l1(
    x: &SparseDesign,
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    link: Link,
) -> Result<HalFit> {
    fit_weighted_l1_with(x, y, weights, lambda, link, &FitOptions::default(), None)
}

/// [`fit_weighted_l1`] with explicit options and an optional warm start
/// `(intercept, beta)`.
pub fn fit_weighted_l1_with(
    x: &SparseDesign,
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    link: Link,
    opts: &FitOptions,
    warm: Option<(f64, &[f64])>,
) -> Result<HalFit> {
    validate_inputs(x, y, weights, lambda, link)?;
    let p = x.n_cols();
    let n = x.n_rows;

    let (mut b0, mut beta) = match warm {
        Some((b0, b)) if b.len() == p => (b0, b.to_vec()),
        Some(_) => return Err(validation("warm start has the wrong length")),
        None => {
            let wsum: f64 = weights.iter().sum();
            let ybar = y.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
            let b0 = match link {
                Link::Identity => ybar,
                Link::Logit => logit(ybar.clamp(1e-10, 1.0 - 1e-10)),
            };
            (b0, vec![0.0; p])
        }
    };
    let mut eta = x.linear_predictor(b0, &beta);
    let ones = SparseColumn {
        idx: (0..n as u32).collect(),
        val: vec![1.0; n],
    };

    let objective = |eta: &[f64], beta: &[f64]| -> f64 {
        weighted_loss(link, y, weights, eta) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };

    let mut trace = vec![objective(&eta, &beta)];
    let mut sweeps = 0usize;
    let mut converged = false;
    let mut full_sweep = true;

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_change = 0.0f64;

        let d = coordinate_step(&ones, y, weights, &mut eta, b0, 0.0, link);
        b0 += d;
        max_change = max_change.max(d.abs());

        for j in 0..p {
            if !full_sweep && beta[j] == 0.0 {
                continue;
            }
            let col = &x.cols[j];
            if col.idx.is_empty() {
                continue;
            }
            let d = coordinate_step(col, y, weights, &mut eta, beta[j], lambda, link);
            beta[j] += d;
            max_change = max_change.max(d.abs());
        }
        trace.push(objective(&eta, &beta));

        if max_change >= opts.tol && sweeps.is_multiple_of(NEWTON_EVERY) {
            if let Some(value) = active_set_newton(x, y, weights, lambda, link, &mut b0, &mut beta, &mut eta) {
                trace.push(value);
            }
        }

        if max_change < opts.tol {
            if full_sweep {
                converged = true;
                break;
            }
            full_sweep = true;
        } else {
            full_sweep = false;
        }
    }

    Ok(HalFit {
        intercept: b0,
        beta,
        lambda,
        link,
        objective_trace: trace,
        sweeps,
        converged,
    })
}

/// Sweeps between active-set Newton refinements.
const NEWTON_EVERY: usize = 2;

/// One damped Newton step on the intercept and the nonzero coefficients,
/// holding their signs fixed so the penalty is linear. Coefficients that
/// would change sign are set to zero, and the step is halved until the
/// objective drops. Returns the new objective when a step was taken.
///
/// Nested indicator columns are highly correlated and cyclic updates crawl
/// along them; this moves the active block jointly.
#[allow(clippy::too_many_arguments)]
fn active_set_newton(
    x: &SparseDesign,
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    link: Link,
    b0: &mut f64,
    beta: &mut [f64],
    eta: &mut Vec<f64>,
) -> Option<f64> {
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    let n = x.n_rows;
    let m = active.len() + 1;
    let mut xa = DMatrix::<f64>::zeros(n, m);
    for i in 0..n {
        xa[(i, 0)] = 1.0;
    }
    for (k, &j) in active.iter().enumerate() {
        let c = &x.cols[j];
        for (&i, &v) in c.idx.iter().zip(&c.val) {
            xa[(i as usize, k + 1)] = v;
        }
    }
    let mut resid = DVector::<f64>::zeros(n);
    let mut xw = xa.clone();
    for i in 0..n {
        let (mu, var) = match link {
            Link::Identity => (eta[i], 1.0),
            Link::Logit => {
                let p = expit(eta[i]);
                (p, p * (1.0 - p))
            }
        };
        resid[i] = weights[i] * (mu - y[i]);
        xw.row_mut(i).scale_mut(weights[i] * var);
    }
    let mut grad = xa.tr_mul(&resid);
    for (k, &j) in active.iter().enumerate() {
        grad[k + 1] += lambda * beta[j].signum();
    }
    let mut hess = xa.tr_mul(&xw);
    let ridge = 1e-10 * hess.diagonal().max().max(1e-300);
    for k in 0..m {
        hess[(k, k)] += ridge;
    }
    let dir = -hess.cholesky()?.solve(&grad);
    if !dir.iter().all(|v| v.is_finite()) {
        return None;
    }

    let penalty = |beta: &[f64]| lambda * beta.iter().map(|b| b.abs()).sum::<f64>();
    let before = weighted_loss(link, y, weights, eta) + penalty(beta);
    let mut t = 1.0f64;
    for _ in 0..30 {
        let mut trial = beta.to_vec();
        for (k, &j) in active.iter().enumerate() {
            let v = beta[j] + t * dir[k + 1];
            trial[j] = if v * beta[j] > 0.0 { v } else { 0.0 };
        }
        let trial_b0 = *b0 + t * dir[0];
        let trial_eta = x.linear_predictor(trial_b0, &trial);
        let after = weighted_loss(link, y, weights, &trial_eta) + penalty(&trial);
        if after < before {
            *b0 = trial_b0;
            beta.copy_from_slice(&trial);
            *eta = trial_eta;
            return Some(after);
        }
        t *= 0.5;
    }
    None
}

/// Updates one coordinate in place and returns the applied change.
fn coordinate_step(
    col: &SparseColumn,
    y: &[f64],
    weights: &[f64],
    eta: &mut [f64],
    current: f64,
    lambda: f64,
    link: Link,
) -> f64 {
    let mut grad = 0.0;
    let mut curv = 0.0;
    let mut curv_bound = 0.0;
    for (&i, &v) in col.idx.iter().zip(&col.val) {
        let i = i as usize;
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let (mu, var) = match link {
            Link::Identity => (eta[i], 1.0),
            Link::Logit => {
                let p = expit(eta[i]);
                (p, p * (1.0 - p))
            }
        };
        grad += w * v * (mu - y[i]);
        curv += w * v * v * var;
        curv_bound += w * v * v;
    }
    if curv_bound == 0.0 {
        return 0.0;
    }
    if link == Link::Logit {
        curv_bound *= 0.25;
    }

    let prox = |h: f64| -> f64 {
        let z = current - grad / h;
        if lambda > 0.0 {
            soft_threshold(z, lambda / h)
        } else {
            z
        }
    };

    let delta_obj = |eta: &[f64], d: f64| -> f64 {
        let mut s = 0.0;
        for (&i, &v) in col.idx.iter().zip(&col.val) {
            let i = i as usize;
            let w = weights[i];
            if w != 0.0 {
                s += w * (pointwise_loss(link, y[i], eta[i] + d * v) - pointwise_loss(link, y[i], eta[i]));
            }
        }
        s + lambda * ((current + d).abs() - current.abs())
    };

    let d = match link {
        Link::Identity => prox(curv_bound) - current,
        Link::Logit => {
            let newton = if curv > 1e-12 * curv_bound { prox(curv) - current } else { 0.0 };
            if newton != 0.0 && delta_obj(eta, newton) <= 0.0 {
                newton
            } else {
                let mm = prox(curv_bound) - current;
                if mm != 0.0 && delta_obj(eta, mm) <= 0.0 {
                    mm
                } else {
                    0.0
                }
            }
        }
    };
    if d != 0.0 {
        for (&i, &v) in col.idx.iter().zip(&col.val) {
            eta[i as usize] += d * v;
        }
    }
    d
}

/// Doubles every row: `(x_i, 1, tau_i)` then `(x_i, 0, 1 - tau_i)`.
///
/// The weighted Bernoulli likelihood of the result equals the
/// fractional-label likelihood `sum tau log p + (1 - tau) log(1 - p)`.
pub fn duplicate_for_fractional(
    x: &SparseDesign,
    tau: &[f64],
) -> Result<(SparseDesign, Vec<f64>, Vec<f64>)> {
    if tau.len() != x.n_rows {
        return Err(validation(format!(
            "tau has {} entries for {} rows",
            tau.len(),
            x.n_rows
        )));
    }
    if let Some(i) = tau.iter().position(|t| !(0.0..=1.0).contains(t)) {
        return Err(validation(format!("tau[{i}] = {} is outside [0, 1]", tau[i])));
    }
    let cols = x
        .cols
        .iter()
        .map(|c| {
            let mut idx = Vec::with_capacity(2 * c.idx.len());
            let mut val = Vec::with_capacity(2 * c.val.len());
            for (&i, &v) in c.idx.iter().zip(&c.val) {
                idx.push(2 * i);
                val.push(v);
                idx.push(2 * i + 1);
                val.push(v);
            }
            SparseColumn { idx, val }
        })
        .collect();
    let mut y = Vec::with_capacity(2 * tau.len());
    let mut w = Vec::with_capacity(2 * tau.len());
    for &t in tau {
        y.push(1.0);
        w.push(t);
        y.push(0.0);
        w.push(1.0 - t);
    }
    Ok((
        SparseDesign {
            n_rows: 2 * x.n_rows,
            cols,
        },
        y,
        w,
    ))
}

/// Smallest lambda at which every coefficient is zero, from the KKT condition
/// at the intercept-only fit.
pub fn lambda_max(x: &SparseDesign, y: &[f64], weights: &[f64], link: Link) -> Result<f64> {
    validate_inputs(x, y, weights, 0.0, link)?;
    let wsum: f64 = weights.iter().sum();
    let ybar = y.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let mu = match link {
        Link::Identity => ybar,
        Link::Logit => ybar.clamp(1e-10, 1.0 - 1e-10),
    };
    Ok(x.cols
        .iter()
        .map(|c| {
            c.idx
                .iter()
                .zip(&c.val)
                .map(|(&i, &v)| weights[i as usize] * v * (y[i as usize] - mu))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max))
}

/// Geometric grid from `lambda_max` down to `lambda_max * min_ratio`, descending.
pub fn lambda_grid(x: &SparseDesign, y: &[f64], weights: &[f64], link: Link, len: usize, min_ratio: f64) -> Result<Vec<f64>> {
    let top = lambda_max(x, y, weights, link)?;
    if top == 0.0 || len <= 1 {
        return Ok(vec![top]);
    }
    let step = min_ratio.ln() / (len - 1) as f64;
    Ok((0..len).map(|k| top * (step * k as f64).exp()).collect())
}

/// K-fold cross-validation of lambda; row `i` is held out in fold `i % folds`.
///
/// Returns the grid value with the smallest held-out weighted loss; ties go to
/// the larger lambda.
pub fn cross_validate_lambda(
    x: &SparseDesign,
    y: &[f64],
    weights: &[f64],
    link: Link,
    folds: usize,
    grid: &[f64],
) -> Result<f64> {
    let groups: Vec<usize> = (0..x.n_rows).collect();
    cross_validate_lambda_grouped(x, y, weights, link, folds, grid, &groups)
}

/// As [`cross_validate_lambda`], but rows sharing a group id stay in the same
/// fold (`group % folds`). Used for duplicated fractional-label data.
pub fn cross_validate_lambda_grouped(
    x: &SparseDesign,
    y: &[f64],
    weights: &[f64],
    link: Link,
    folds: usize,
    grid: &[f64],
    groups: &[usize],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(validation("lambda grid is empty"));
    }
    if folds < 2 {
        return Err(validation("cross-validation needs at least 2 folds"));
    }
    if groups.len() != x.n_rows {
        return Err(validation("group labels do not match the design rows"));
    }
    validate_inputs(x, y, weights, 0.0, link)?;
    if grid.len() == 1 {
        return Ok(grid[0]);
    }

    let mut losses = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..x.n_rows).filter(|&i| groups[i] % folds != f).collect();
        let test: Vec<usize> = (0..x.n_rows).filter(|&i| groups[i] % folds == f).collect();
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let wt: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
        if wt.iter().all(|w| *w == 0.0) {
            continue;
        }
        let xv = x.select_rows(&test);
        let yv: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let wv: Vec<f64> = test.iter().map(|&i| weights[i]).collect();

        // Descending order so each fit warm-starts from a sparser solution.
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
        let mut warm: Option<(f64, Vec<f64>)> = None;
        for k in order {
            let fit = fit_weighted_l1_with(
                &xt,
                &yt,
                &wt,
                grid[k],
                link,
                &FitOptions::default(),
                warm.as_ref().map(|(b0, b)| (*b0, b.as_slice())),
            )?;
            let eta = xv.linear_predictor(fit.intercept, &fit.beta);
            losses[k] += weighted_loss(link, &yv, &wv, &eta);
            warm = Some((fit.intercept, fit.beta));
        }
    }

    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::NonConvergence("cross-validation produced no finite loss".into()));
    }
    let tie = 1e-12 * best.abs().max(1.0);
    Ok(grid
        .iter()
        .zip(&losses)
        .filter(|(_, l)| **l <= best + tie)
        .map(|(g, _)| *g)
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(n: usize, f: impl Fn(usize) -> f64) -> SparseDesign {
        SparseDesign::from_dense_columns(n, &[(0..n).map(f).collect()]).unwrap()
    }

    #[test]
    fn binary_covariate_yields_one_indicator() {
        let rows = [0.0, 1.0, 1.0, 0.0];
        let b = build_basis(&rows, 1, 1, 50).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.columns[0].terms, vec![(0, 1.0)]);
    }

    #[test]
    fn candidate_bound_for_two_dims() {
        let rows = [0.1, 0.5, 0.3, 0.2, 0.7, 0.9];
        let b = build_basis(&rows, 2, 2, 50).unwrap();
        assert!(b.candidate_count <= 3 * 3);
        assert!(b.len() <= b.candidate_count);
    }

    #[test]
    fn constant_dimension_adds_nothing() {
        // second dimension constant
        let rows = [0.0, 5.0, 1.0, 5.0, 2.0, 5.0];
        let b = build_basis(&rows, 2, 2, 50).unwrap();
        assert!(b.columns.iter().all(|c| c.terms.iter().all(|(d, _)| *d == 0)));
        assert!(b.knots[1].is_empty());
    }

    #[test]
    fn empty_data_rejected() {
        assert!(build_basis(&[], 1, 1, 10).is_err());
        assert!(build_basis(&[1.0], 1, 0, 10).is_err());
    }

    #[test]
    fn thinning_keeps_endpoints() {
        let vals: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let t = thin(&vals, 5);
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 99.0);
    }

    #[test]
    fn huge_lambda_zeroes_coefficients() {
        let x = column(6, |i| (i % 2) as f64);
        let y = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let fit = fit_weighted_l1(&x, &y, &[1.0; 6], 1e6, Link::Logit).unwrap();
        assert_eq!(fit.beta, vec![0.0]);
        assert!((fit.intercept - logit(4.0 / 6.0)).abs() < 1e-8);
    }

    #[test]
    fn symmetric_fractional_labels_give_half() {
        let x = column(5, |i| i as f64);
        let y = [0.5; 5];
        for lambda in [0.0, 0.3, 10.0] {
            let fit = fit_weighted_l1(&x, &y, &[1.0; 5], lambda, Link::Logit).unwrap();
            for p in fit.predict(&x) {
                assert!((p - 0.5).abs() < 1e-8, "lambda {lambda}: {p}");
            }
        }
    }

    #[test]
    fn unpenalized_binary_column_matches_log_odds_ratio() {
        // 2x2 table: x=0 -> 3 ones of 8; x=1 -> 6 ones of 9.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (x, ones, total) in [(0.0, 3, 8), (1.0, 6, 9)] {
            for k in 0..total {
                xs.push(x);
                ys.push(if k < ones { 1.0 } else { 0.0 });
            }
        }
        let n = xs.len();
        let x = SparseDesign::from_dense_columns(n, &[xs]).unwrap();
        let fit = fit_weighted_l1(&x, &ys, &vec![1.0; n], 0.0, Link::Logit).unwrap();
        let b0 = (3.0f64 / 5.0).ln();
        let b1 = (6.0f64 / 3.0).ln() - b0;
        assert!((fit.intercept - b0).abs() < 1e-6);
        assert!((fit.beta[0] - b1).abs() < 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn identity_link_soft_thresholds_orthonormal_column() {
        // centered, unit-norm column so the intercept decouples
        let raw = [-3.0, -1.0, 1.0, 3.0];
        let norm = raw.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let xcol: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let y = [0.3, -1.2, 2.0, 1.4];
        let z: f64 = xcol.iter().zip(&y).map(|(a, b)| a * b).sum();
        let x = SparseDesign::from_dense_columns(4, &[xcol]).unwrap();
        for lambda in [0.0, 0.5, 1.0, 5.0] {
            let fit = fit_weighted_l1(&x, &y, &[1.0; 4], lambda, Link::Identity).unwrap();
            let expect = z.signum() * (z.abs() - lambda).max(0.0);
            assert!((fit.beta[0] - expect).abs() < 1e-8, "lambda {lambda}");
            assert!((fit.intercept - y.iter().sum::<f64>() / 4.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = column(2, |i| i as f64);
        assert!(fit_weighted_l1(&x, &[0.0, 1.0], &[0.0, 0.0], 0.1, Link::Logit).is_err());
        assert!(fit_weighted_l1(&x, &[0.0, f64::NAN], &[1.0, 1.0], 0.1, Link::Logit).is_err());
        assert!(fit_weighted_l1(&x, &[0.0, 1.0], &[1.0, 1.0], -1.0, Link::Logit).is_err());
    }

    #[test]
    fn duplication_boundaries() {
        let x = column(2, |i| i as f64 + 1.0);
        let (x2, y2, w2) = duplicate_for_fractional(&x, &[1.0, 0.0]).unwrap();
        assert_eq!(x2.n_rows, 4);
        assert_eq!(y2, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(w2, vec![1.0, 0.0, 0.0, 1.0]);

        let x = column(1, |_| 1.0);
        let (_, _, w) = duplicate_for_fractional(&x, &[0.3]).unwrap();
        assert_eq!(w, vec![0.3, 0.7]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(duplicate_for_fractional(&x, &[1.3]).is_err());
    }

    #[test]
    fn cv_singleton_and_errors() {
        let x = column(10, |i| (i % 3) as f64);
        let y: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let w = vec![1.0; 10];
        assert_eq!(cross_validate_lambda(&x, &y, &w, Link::Logit, 3, &[0.7]).unwrap(), 0.7);
        assert!(cross_validate_lambda(&x, &y, &w, Link::Logit, 3, &[]).is_err());
        assert!(cross_validate_lambda(&x, &y, &w, Link::Logit, 1, &[0.1, 0.2]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn objective_trace_is_non_increasing(
            seed in 0u64..1000,
            lambda in 0.0f64..3.0,
            logistic in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let rows: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
            let basis = build_basis(&rows, 2, 2, 6).unwrap();
            let x = basis.design(&rows, 2).unwrap();
            let link = if logistic { Link::Logit } else { Link::Identity };
            let y: Vec<f64> = (0..n).map(|i| {
                let s = rows[2 * i] + rows[2 * i + 1];
                if logistic { if rng.random::<f64>() < s / 2.0 { 1.0 } else { 0.0 } } else { s + rng.random::<f64>() }
            }).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
            let fit = fit_weighted_l1(&x, &y, &w, lambda, link).unwrap();
            for pair in fit.objective_trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0), "{:?}", pair);
            }
            prop_assert!(fit.l1_norm().is_finite());
        }
    }
}
