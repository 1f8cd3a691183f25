//! Discrete structural model used for simulation and exact oracles.
//!
//! ```text
//! W = stratum drawn from covariate_pmf        (U_W)
//! Z = inverse-CDF draw from h(.|W)            (U_Z)
//! A = 1{U < p(Z, W)},  U ~ Uniform(0, 1)
//! Y = alpha A + gamma.W + delta U + eps       (additive)
//! Y = A U + gamma.W + eps                     (multiplicative_confounding)
//! ```
//!
//! `U` is the latent confounder shared by the treatment threshold and the
//! outcome; `eps ~ N(0, noise_sd^2)`. The multiplicative mode is an extension
//! used to exercise the case where instrument-intervened and independently
//! drawn treatments give different outcome means.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CounterfactualDataset, ObservedDataset, WorldTag};
use crate::error::{validation, Error, Result};
use crate::induced::{InducedMarginal, InstrumentPolicy};
use crate::joint::DiscreteJoint;
use crate::kl::TreatmentTarget;
use crate::nuisance::{ConditionalKernel, InstrumentDensity};
use crate::rng;
use crate::table::StratifiedTable;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    #[default]
    Additive,
    MultiplicativeConfounding,
}

/// Full structural model over finite covariate strata and instrument support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpsemSpec {
    /// Covariate vector of each stratum.
    pub covariate_values: Vec<Vec<f64>>,
    pub covariate_pmf: Vec<f64>,
    pub instrument_support: Vec<f64>,
    /// Natural `h(z|w)`, indexed `[stratum][z]`.
    pub instrument_policy: Vec<Vec<f64>>,
    /// `P(A = 1 | z, w)`, indexed `[z][stratum]`.
    pub treatment_kernel: Vec<Vec<f64>>,
    pub alpha: f64,
    pub gamma: Vec<f64>,
    pub delta: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub outcome_mode: OutcomeMode,
}

impl NpsemSpec {
    /// The binary example: `W = 1{U_W < 0.3}`, `h = (0.3, 0.8)`,
    /// kernel `(0.3, 0.8; 0.7, 0.5)` and `Y = 2A + W - U + N(0, 0.05^2)`.
    pub fn toy() -> Self {
        Self {
            covariate_values: vec![vec![0.0], vec![1.0]],
            covariate_pmf: vec![0.7, 0.3],
            instrument_support: vec![0.0, 1.0],
            instrument_policy: vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            treatment_kernel: vec![vec![0.3, 0.8], vec![0.7, 0.5]],
            alpha: 2.0,
            gamma: vec![1.0],
            delta: -1.0,
            noise_sd: 0.05,
            outcome_mode: OutcomeMode::Additive,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn n_strata(&self) -> usize {
        self.covariate_values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let k = self.n_strata();
        let q = self.instrument_support.len();
        if k == 0 {
            return Err(validation("spec has no covariate strata"));
        }
        if q == 0 {
            return Err(validation("spec has an empty instrument support"));
        }
        for (s, w) in self.covariate_values.iter().enumerate() {
            if w.len() != d {
                return Err(validation(format!(
                    "covariate_values[{s}] has {} entries but gamma has {d}",
                    w.len()
                )));
            }
        }
        if self.covariate_pmf.len() != k {
            return Err(validation(format!(
                "covariate_pmf has {} entries for {k} strata",
                self.covariate_pmf.len()
            )));
        }
        check_pmf("covariate_pmf", &self.covariate_pmf)?;
        if self.instrument_policy.len() != k {
            return Err(validation(format!(
                "instrument_policy has {} rows for {k} strata",
                self.instrument_policy.len()
            )));
        }
        for (s, row) in self.instrument_policy.iter().enumerate() {
            if row.len() != q {
                return Err(validation(format!(
                    "instrument_policy row {s} has {} entries for support of size {q}",
                    row.len()
                )));
            }
            check_pmf(&format!("instrument_policy row {s}"), row)?;
        }
        if self.treatment_kernel.len() != q {
            return Err(validation(format!(
                "treatment_kernel has {} rows for support of size {q}",
                self.treatment_kernel.len()
            )));
        }
        for (z, row) in self.treatment_kernel.iter().enumerate() {
            if row.len() != k {
                return Err(validation(format!(
                    "treatment_kernel row {z} has {} entries for {k} strata",
                    row.len()
                )));
            }
            if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(validation(format!(
                    "treatment_kernel row {z}, entry {j} = {} is not a probability",
                    row[j]
                )));
            }
        }
        let mut sup = self.instrument_support.clone();
        sup.sort_by(|a, b| a.total_cmp(b));
        sup.dedup();
        if sup.len() != q {
            return Err(validation("instrument_support has repeated values"));
        }
        // strata must be distinct
        StratifiedTable::new(
            self.all_columns(),
            self.covariate_values.clone(),
            self.instrument_support.clone(),
            self.instrument_policy.clone(),
        )?;
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(validation("noise_sd must be finite and non-negative"));
        }
        if ![self.alpha, self.delta].iter().chain(&self.gamma).all(|v| v.is_finite()) {
            return Err(validation("outcome coefficients must be finite"));
        }
        Ok(())
    }

    pub fn all_columns(&self) -> Vec<usize> {
        (0..self.dim()).collect()
    }

    pub fn stratum_of(&self, w: &[f64]) -> Option<usize> {
        let key = crate::math::key_of(w);
        self.covariate_values.iter().position(|v| crate::math::key_of(v) == key)
    }

    /// `P(A = 1 | Z = support[z], W = stratum s)`.
    pub fn kernel_p1(&self, z: usize, s: usize) -> f64 {
        self.treatment_kernel[z][s]
    }

    /// The natural instrument law as a policy (same table as the model).
    pub fn natural_policy(&self) -> Result<InstrumentPolicy> {
        InstrumentPolicy::tabular(self.natural_table()?)
    }

    /// The policy `h*(1|w) = (0.7, 0.4)` studied on the binary example.
    pub fn toy_policy() -> InstrumentPolicy {
        InstrumentPolicy::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.7, 0.4])
            .expect("constant policy table is valid")
    }

    /// The design (known) instrument density.
    pub fn natural_density(&self) -> Result<InstrumentDensity> {
        Ok(InstrumentDensity::new(self.natural_table()?))
    }

    fn natural_table(&self) -> Result<StratifiedTable> {
        StratifiedTable::new(
            self.all_columns(),
            self.covariate_values.clone(),
            self.instrument_support.clone(),
            self.instrument_policy.clone(),
        )
    }

    /// The true treatment kernel as a tabular [`ConditionalKernel`].
    pub fn kernel(&self) -> Result<ConditionalKernel> {
        let values = (0..self.n_strata())
            .map(|s| (0..self.instrument_support.len()).map(|z| self.treatment_kernel[z][s]).collect())
            .collect();
        Ok(ConditionalKernel::tabular(StratifiedTable::new(
            self.all_columns(),
            self.covariate_values.clone(),
            self.instrument_support.clone(),
            values,
        )?))
    }

    fn linear_w(&self, s: usize) -> f64 {
        self.gamma
            .iter()
            .zip(&self.covariate_values[s])
            .map(|(g, w)| g * w)
            .sum()
    }

    fn outcome(&self, a: f64, s: usize, u: f64, eps: f64) -> f64 {
        match self.outcome_mode {
            OutcomeMode::Additive => self.alpha * a + self.linear_w(s) + self.delta * u + eps,
            OutcomeMode::MultiplicativeConfounding => a * u + self.linear_w(s) + eps,
        }
    }

    /// `E[Y | A = a, W = s]` when `A = 1{U < p}`, integrating `U` in closed form.
    pub(crate) fn cell_mean(&self, a: usize, p: f64, s: usize) -> f64 {
        let u_mean = if a == 1 { p / 2.0 } else { (1.0 + p) / 2.0 };
        match self.outcome_mode {
            OutcomeMode::Additive => self.alpha * a as f64 + self.linear_w(s) + self.delta * u_mean,
            OutcomeMode::MultiplicativeConfounding => {
                if a == 1 {
                    u_mean + self.linear_w(s)
                } else {
                    self.linear_w(s)
                }
            }
        }
    }

    /// Structural `E[Y | Z = z, W = s]` (equal to the observed regression by
    /// instrument randomization).
    pub(crate) fn structural_q(&self, z: usize, s: usize) -> f64 {
        let p = self.kernel_p1(z, s);
        p * self.cell_mean(1, p, s) + (1.0 - p) * self.cell_mean(0, p, s)
    }

    /// Policy row over the model's support for stratum `s`, with the
    /// positivity check against the natural instrument law.
    fn policy_row(&self, policy: &InstrumentPolicy, s: usize, check_positivity: bool) -> Result<Vec<f64>> {
        let w = &self.covariate_values[s];
        let support = policy.support();
        let mut row = vec![0.0; self.instrument_support.len()];
        for z in support {
            let mass = policy.prob(z, w)?;
            if mass == 0.0 {
                continue;
            }
            let k = self.instrument_support.iter().position(|v| *v == z).ok_or_else(|| {
                Error::Positivity(format!("policy puts mass {mass} on z={z}, outside the instrument support"))
            })?;
            if check_positivity && self.instrument_policy[s][k] == 0.0 {
                return Err(Error::Positivity(format!(
                    "policy puts mass {mass} on (z={z}, w={w:?}) where the natural instrument density is 0"
                )));
            }
            row[k] = mass;
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(validation(format!("policy row at w={w:?} sums to {sum}")));
        }
        Ok(row)
    }
}

fn check_pmf(what: &str, row: &[f64]) -> Result<()> {
    if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(validation(format!("{what}: entry {j} = {} is not a probability", row[j])));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(validation(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn cumulative(row: &[f64]) -> Vec<f64> {
    row.iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// Inverse-CDF draw; rounding slack at the top falls on the last positive cell.
fn draw_index(cum: &[f64], row: &[f64], u: f64) -> usize {
    match cum.iter().position(|c| u < *c) {
        Some(k) => k,
        None => row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1),
    }
}

struct Latents {
    u_w: f64,
    u_z: f64,
    u: f64,
    eps: f64,
}

fn draw_latents<R: Rng>(rng: &mut R, sd: f64) -> Latents {
    let u_w = rng.random::<f64>();
    let u_z = rng.random::<f64>();
    let u = rng.random::<f64>();
    let e: f64 = rng.sample(StandardNormal);
    Latents { u_w, u_z, u, eps: sd * e }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(validation("n must be at least 1"));
    }
    Ok(())
}

/// `n` i.i.d. draws from the natural model, deterministic in `seed`.
pub fn simulate_natural(spec: &NpsemSpec, n: usize, seed: u64) -> Result<ObservedDataset> {
    simulate_natural_stream(spec, n, seed, 0)
}

/// [`simulate_natural`] on an explicit RNG stream (one per replication).
pub fn simulate_natural_stream(spec: &NpsemSpec, n: usize, seed: u64, stream: u64) -> Result<ObservedDataset> {
    spec.validate()?;
    check_n(n)?;
    let mut rng = rng::stream(seed, stream);
    let cum_w = cumulative(&spec.covariate_pmf);
    let cum_h: Vec<Vec<f64>> = spec.instrument_policy.iter().map(|r| cumulative(r)).collect();
    let d = spec.dim();
    let mut w = Vec::with_capacity(n * d);
    let mut z = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let l = draw_latents(&mut rng, spec.noise_sd);
        let s = draw_index(&cum_w, &spec.covariate_pmf, l.u_w);
        let k = draw_index(&cum_h[s], &spec.instrument_policy[s], l.u_z);
        let treat = if l.u < spec.kernel_p1(k, s) { 1.0 } else { 0.0 };
        w.extend_from_slice(&spec.covariate_values[s]);
        z.push(spec.instrument_support[k]);
        a.push(treat);
        y.push(spec.outcome(treat, s, l.u, l.eps));
    }
    let mut data = ObservedDataset::new(d, w, z, a, y)?;
    data.seed = Some(seed);
    Ok(data)
}

/// Draws from the world where `Z` follows `policy` and `(U, eps)` are the
/// same latents the natural equations would use. With the natural policy and
/// the same seed the rows coincide with [`simulate_natural`].
pub fn simulate_instrument_intervention(
    spec: &NpsemSpec,
    policy: &InstrumentPolicy,
    n: usize,
    seed: u64,
) -> Result<CounterfactualDataset> {
    spec.validate()?;
    check_n(n)?;
    let rows: Vec<Vec<f64>> = (0..spec.n_strata())
        .map(|s| spec.policy_row(policy, s, true))
        .collect::<Result<_>>()?;
    let cum_h: Vec<Vec<f64>> = rows.iter().map(|r| cumulative(r)).collect();
    let cum_w = cumulative(&spec.covariate_pmf);
    let mut rng = rng::stream(seed, 0);
    let d = spec.dim();
    let mut w = Vec::with_capacity(n * d);
    let mut z = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let l = draw_latents(&mut rng, spec.noise_sd);
        let s = draw_index(&cum_w, &spec.covariate_pmf, l.u_w);
        let k = draw_index(&cum_h[s], &rows[s], l.u_z);
        let treat = if l.u < spec.kernel_p1(k, s) { 1.0 } else { 0.0 };
        w.extend_from_slice(&spec.covariate_values[s]);
        z.push(spec.instrument_support[k]);
        a.push(treat);
        y.push(spec.outcome(treat, s, l.u, l.eps));
    }
    Ok(CounterfactualDataset {
        dim: d,
        w,
        z_star: Some(z),
        a_star: a,
        y_star: y,
        world: WorldTag::InstrumentIntervention,
        seed,
    })
}

fn target_p1(spec: &NpsemSpec, target: &TreatmentTarget) -> Result<Vec<f64>> {
    match target {
        TreatmentTarget::Binary(g) => {
            g.validate()?;
            (0..spec.n_strata())
                .map(|s| g.p1(&spec.covariate_values[s]))
                .collect()
        }
        TreatmentTarget::Gaussian { .. } => Err(Error::Unsupported(
            "the discrete model has a binary treatment; a Gaussian target cannot be drawn".into(),
        )),
    }
}

/// Draws `A ~ target(.|W)` independently of the outcome latents, then
/// `Y = f_Y(A, W, U, eps)`.
pub fn simulate_independent_policy(
    spec: &NpsemSpec,
    target: &TreatmentTarget,
    n: usize,
    seed: u64,
) -> Result<CounterfactualDataset> {
    spec.validate()?;
    check_n(n)?;
    let p1 = target_p1(spec, target)?;
    let cum_w = cumulative(&spec.covariate_pmf);
    let mut rng = rng::stream(seed, 0);
    let d = spec.dim();
    let mut w = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let l = draw_latents(&mut rng, spec.noise_sd);
        let v = rng.random::<f64>();
        let s = draw_index(&cum_w, &spec.covariate_pmf, l.u_w);
        let treat = if v < p1[s] { 1.0 } else { 0.0 };
        w.extend_from_slice(&spec.covariate_values[s]);
        a.push(treat);
        y.push(spec.outcome(treat, s, l.u, l.eps));
    }
    Ok(CounterfactualDataset {
        dim: d,
        w,
        z_star: None,
        a_star: a,
        y_star: y,
        world: WorldTag::IndependentPolicy,
        seed,
    })
}

/// Exact `E[Y^{h*}]` by the identification formula
/// `sum_w P(w) sum_z h*(z|w) E[Y | z, w]`, with `E[Y | z, w]` integrated in
/// closed form over the latent `U`.
pub fn population_truth(spec: &NpsemSpec, policy: &InstrumentPolicy) -> Result<f64> {
    spec.validate()?;
    let mut total = 0.0;
    for s in 0..spec.n_strata() {
        let row = spec.policy_row(policy, s, true)?;
        let inner: f64 = row
            .iter()
            .enumerate()
            .map(|(k, h)| h * spec.structural_q(k, s))
            .sum();
        total += spec.covariate_pmf[s] * inner;
    }
    Ok(total)
}

/// Mean outcome of the propagated world: enumerate `(W, Z*, A*)` with
/// `Z* ~ h*`, `A* = 1{U < p(Z*, W)}` and average the cell means.
pub fn propagated_world_mean(spec: &NpsemSpec, policy: &InstrumentPolicy) -> Result<f64> {
    Ok(DiscreteJoint::intervened(spec, policy)?.mean_outcome())
}

/// Exact outcome mean when `A ~ target(.|W)` is drawn independently of `U`.
pub fn independent_policy_truth(spec: &NpsemSpec, target: &InducedMarginal) -> Result<f64> {
    spec.validate()?;
    let t = TreatmentTarget::Binary(target.clone());
    let p1 = target_p1(spec, &t)?;
    let mut total = 0.0;
    for (s, p) in p1.iter().enumerate() {
        let m = match spec.outcome_mode {
            OutcomeMode::Additive => spec.alpha * p + spec.linear_w(s) + spec.delta * 0.5,
            OutcomeMode::MultiplicativeConfounding => p * 0.5 + spec.linear_w(s),
        };
        total += spec.covariate_pmf[s] * m;
    }
    Ok(total)
}

impl NpsemSpec {
    pub(crate) fn policy_row_unchecked(&self, policy: &InstrumentPolicy, s: usize) -> Result<Vec<f64>> {
        self.policy_row(policy, s, false)
    }
}
