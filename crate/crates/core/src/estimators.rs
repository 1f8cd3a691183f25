//! G-computation, the efficient influence curve, TMLE for `E[Y^{h*}]`,
//! Wald marginal contrasts and the Monte Carlo replication harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ObservedDataset;
use crate::error::{validation, Error, Result};
use crate::induced::{incompatibility_error, z_compatible, InducedMarginal, InstrumentPolicy, DEGENERATE_TOL};
use crate::math::{expit, logit, mean, normal_critical, sd_population};
use crate::npsem::{population_truth, simulate_natural_stream, NpsemSpec};
use crate::nuisance::{
    fit_instrument_density, fit_outcome_regression, ConditionalKernel, InstrumentDensity, OutcomeKind,
    OutcomeRegression,
};
use crate::rng::replication_stream;

/// Margin added to the observed outcome range before mapping to `[0, 1]`.
pub const BOUND_MARGIN: f64 = 1e-6;
const PROB_CLAMP: f64 = 1e-9;

/// Per-row quantities every estimator needs: `Q` at the observed `Z`, the
/// policy-averaged `sum_z Q(z, W) h*(z|W)` and the clever weight.
struct RowCache {
    /// `(z, h*(z|W_i))` for each support point with positive mass, per row.
    policy: Vec<Vec<(f64, f64)>>,
    weight: Vec<f64>,
}

fn row_cache(data: &ObservedDataset, h_nat: Option<&InstrumentDensity>, policy: &InstrumentPolicy) -> Result<RowCache> {
    let support = policy.support();
    let mut pol = Vec::with_capacity(data.len());
    let mut weight = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let w = data.covariates(i);
        let mut row = Vec::with_capacity(support.len());
        for &z in &support {
            let m = policy.prob(z, w)?;
            if m > 0.0 {
                row.push((z, m));
            }
        }
        if let Some(h) = h_nat {
            for &(z, m) in &row {
                if h.prob(z, w)? == 0.0 {
                    return Err(Error::Positivity(format!(
                        "policy puts mass {m} on (z={z}, w={w:?}) where the instrument density is 0"
                    )));
                }
            }
            let hz = h.prob(data.z[i], w)?;
            let hs = row.iter().find(|(z, _)| *z == data.z[i]).map_or(0.0, |(_, m)| *m);
            if hz == 0.0 {
                if hs > 0.0 {
                    return Err(Error::Positivity(format!("row {i}: h(z|w) = 0 with positive clever weight")));
                }
                weight.push(0.0);
            } else {
                weight.push(hs / hz);
            }
        }
        pol.push(row);
    }
    Ok(RowCache { policy: pol, weight })
}

/// `(1/n) sum_i sum_z Q(z, W_i) h*(z|W_i)`.
pub fn gcomp_estimate(data: &ObservedDataset, q: &OutcomeRegression, policy: &InstrumentPolicy) -> Result<f64> {
    if data.is_empty() {
        return Err(validation("dataset is empty"));
    }
    let cache = row_cache(data, None, policy)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let w = data.covariates(i);
        for &(z, m) in &cache.policy[i] {
            total += m * q.predict(z, w)?;
        }
    }
    Ok(total / data.len() as f64)
}

/// `D*_i = H_i (Y_i - Q(Z_i, W_i)) + sum_z Q(z, W_i) h*(z|W_i) - psi`
/// with clever weight `H = h*/h`.
pub fn eic_values(
    data: &ObservedDataset,
    q: &OutcomeRegression,
    h_nat: &InstrumentDensity,
    policy: &InstrumentPolicy,
    psi: f64,
) -> Result<Vec<f64>> {
    let cache = row_cache(data, Some(h_nat), policy)?;
    (0..data.len())
        .map(|i| {
            let w = data.covariates(i);
            let mut avg = 0.0;
            for &(z, m) in &cache.policy[i] {
                avg += m * q.predict(z, w)?;
            }
            Ok(cache.weight[i] * (data.y[i] - q.predict(data.z[i], w)?) + avg - psi)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EicEstimate {
    pub psi: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    /// Mean of the influence curve at the targeted fit.
    pub mean_eic: f64,
    /// Fitted fluctuation intercept (sum over steps when iterating).
    pub epsilon: f64,
    pub n: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmleOptions {
    pub alpha: f64,
    /// Repeat the fluctuation until the score is negligible instead of a single step.
    pub iterate: bool,
    pub max_steps: usize,
}

impl Default for TmleOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            iterate: false,
            max_steps: 20,
        }
    }
}

/// Root of `sum_i H_i (y_i - expit(o_i + eps))`, which is decreasing in `eps`.
fn solve_fluctuation(ys: &[f64], offset: &[f64], weights: &[f64]) -> Result<f64> {
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(validation("all clever weights are zero"));
    }
    let score = |e: f64| -> (f64, f64) {
        let mut f = 0.0;
        let mut d = 0.0;
        for ((y, o), w) in ys.iter().zip(offset).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let p = expit(o + e);
            f += w * (y - p);
            d += w * p * (1.0 - p);
        }
        (f, d)
    };
    let tol = 1e-14 * wsum;
    let (f0, _) = score(0.0);
    if f0.abs() <= tol {
        return Ok(0.0);
    }
    // Bracket the root.
    let (mut lo, mut hi) = if f0 > 0.0 { (0.0, 1.0) } else { (-1.0, 0.0) };
    let mut expand = 0;
    while score(lo).0 < 0.0 || score(hi).0 > 0.0 {
        if score(lo).0 < 0.0 {
            lo *= 2.0;
            lo -= 1.0;
        }
        if score(hi).0 > 0.0 {
            hi *= 2.0;
            hi += 1.0;
        }
        expand += 1;
        if expand > 60 {
            return Err(Error::NonConvergence("fluctuation score has no root".into()));
        }
    }
    let mut e = 0.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let (f, d) = score(e);
        if f.abs() <= tol {
            return Ok(e);
        }
        if f > 0.0 {
            lo = e;
        } else {
            hi = e;
        }
        let newton = if d > 0.0 { e + f / d } else { f64::NAN };
        e = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * (1.0 + e.abs()) {
            return Ok(e);
        }
    }
    Err(Error::NonConvergence("fluctuation solve exceeded 200 iterations".into()))
}

/// Targeted estimate: logistic fluctuation of the `[0, 1]`-scaled initial
/// regression with offset `logit(Q0)` and weights `h*/h`, then
/// G-computation on the update and the influence-curve standard error.
pub fn tmle_estimate(
    data: &ObservedDataset,
    q_init: &OutcomeRegression,
    h_nat: &InstrumentDensity,
    policy: &InstrumentPolicy,
    opts: &TmleOptions,
) -> Result<EicEstimate> {
    if data.is_empty() {
        return Err(validation("dataset is empty"));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(validation("alpha must lie in (0, 1)"));
    }
    let n = data.len();
    let cache = row_cache(data, Some(h_nat), policy)?;
    let (y_lo, y_hi) = q_init.bounds();
    let lo = y_lo - BOUND_MARGIN;
    let span = (y_hi + BOUND_MARGIN) - lo;
    let scale = |v: f64| ((v - lo) / span).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);

    // Logits of the scaled initial fit at the observed z and at each policy z.
    let mut obs_logit = Vec::with_capacity(n);
    let mut pol_logit: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let w = data.covariates(i);
        obs_logit.push(logit(scale(q_init.predict(data.z[i], w)?)));
        let row = cache.policy[i]
            .iter()
            .map(|&(z, m)| Ok((logit(scale(q_init.predict(z, w)?)), m)))
            .collect::<Result<Vec<_>>>()?;
        pol_logit.push(row);
    }
    let ys: Vec<f64> = data.y.iter().map(|y| ((y - lo) / span).clamp(0.0, 1.0)).collect();

    let unscale = |l: f64| lo + span * expit(l);
    let mut eps_total = 0.0;
    let mut steps = 0;
    let max_steps = if opts.iterate { opts.max_steps.max(1) } else { 1 };
    let (psi, eic) = loop {
        let offset: Vec<f64> = obs_logit.iter().map(|o| o + eps_total).collect();
        let eps = solve_fluctuation(&ys, &offset, &cache.weight)?;
        eps_total += eps;
        steps += 1;
        let avg: Vec<f64> = pol_logit
            .iter()
            .map(|row| row.iter().map(|(l, m)| m * unscale(l + eps_total)).sum())
            .collect();
        let psi = mean(&avg);
        let eic: Vec<f64> = (0..n)
            .map(|i| cache.weight[i] * (data.y[i] - unscale(obs_logit[i] + eps_total)) + avg[i] - psi)
            .collect();
        let done = mean(&eic).abs() <= 1e-10 * sd_population(&eic).max(f64::MIN_POSITIVE);
        if done || steps >= max_steps {
            break (psi, eic);
        }
    };
    let se = sd_population(&eic) / (n as f64).sqrt();
    let crit = normal_critical(opts.alpha);
    Ok(EicEstimate {
        psi,
        se,
        ci: (psi - crit * se, psi + crit * se),
        alpha: opts.alpha,
        mean_eic: mean(&eic),
        epsilon: eps_total,
        n,
        steps,
    })
}

/// Law of the covariate strata over full covariate vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateLaw {
    pub strata: Vec<Vec<f64>>,
    pub pmf: Vec<f64>,
}

/// `E_W[(g*(W) - f*(W)) (E[Y|1,W] - E[Y|0,W]) / (g1(W) - g0(W))]`, with the
/// summand set to zero on weak-instrument strata.
pub fn wald_contrast(
    kernel: &ConditionalKernel,
    q_by_z: &OutcomeRegression,
    w_law: &CovariateLaw,
    g_star: &InducedMarginal,
    f_star: &InducedMarginal,
) -> Result<f64> {
    for t in [g_star, f_star] {
        let report = z_compatible(t, kernel)?;
        if !report.compatible {
            return Err(incompatibility_error(&report));
        }
    }
    if w_law.strata.len() != w_law.pmf.len() {
        return Err(validation("covariate law strata and pmf lengths differ"));
    }
    let mut total = 0.0;
    for (w, p) in w_law.strata.iter().zip(&w_law.pmf) {
        let g0 = kernel.p1(0.0, w)?;
        let g1 = kernel.p1(1.0, w)?;
        if (g1 - g0).abs() <= DEGENERATE_TOL {
            continue;
        }
        let wald = (q_by_z.predict(1.0, w)? - q_by_z.predict(0.0, w)?) / (g1 - g0);
        total += p * (g_star.p1(w)? - f_star.p1(w)?) * wald;
    }
    Ok(total)
}

/// Where the TMLE clever weights take the natural instrument density from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensitySource {
    /// The design randomization of the simulation model.
    #[default]
    Known,
    /// Stratified frequencies on each replicated dataset.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicationConfig {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub outcome: OutcomeKind,
    pub density: DensitySource,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            n_list: vec![100, 500, 1000, 2000, 10_000],
            reps: 1000,
            seed: 20240501,
            alphas: vec![0.1, 0.05],
            outcome: OutcomeKind::OlsMainEffects,
            density: DensitySource::Known,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub n: usize,
    pub mean_tmle: f64,
    pub mean_plugin: f64,
    pub mean_se: f64,
    /// Coverage of the TMLE interval, one entry per configured alpha.
    pub coverage: Vec<f64>,
}

/// Per-replication draws for one sample size (histogram data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSamples {
    pub n: usize,
    pub tmle: Vec<f64>,
    pub plugin: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub seed: u64,
    pub reps: usize,
    pub truth: f64,
    pub alphas: Vec<f64>,
    pub rows: Vec<ReplicationRow>,
    pub samples: Vec<ReplicationSamples>,
}

impl ReplicationReport {
    /// One row per sample size; probabilities as percentages when `percent`.
    pub fn to_csv(&self, percent: bool) -> String {
        let scale = if percent { 100.0 } else { 1.0 };
        let mut out = String::from("n,mean_psi_tmle,mean_psi_plugin,mean_se");
        for a in &self.alphas {
            out.push_str(&format!(",coverage_alpha_{a}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}", r.n, r.mean_tmle, r.mean_plugin, r.mean_se));
            for c in &r.coverage {
                out.push_str(&format!(",{:.6}", c * scale));
            }
            out.push('\n');
        }
        out
    }

    /// Long-format draws: `n,rep,psi_tmle,psi_plugin,se`.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("n,rep,psi_tmle,psi_plugin,se\n");
        for s in &self.samples {
            for r in 0..s.tmle.len() {
                out.push_str(&format!("{},{},{:.12},{:.12},{:.12}\n", s.n, r, s.tmle[r], s.plugin[r], s.se[r]));
            }
        }
        out
    }
}

struct Draw {
    tmle: f64,
    plugin: f64,
    se: f64,
}

fn one_replication(
    spec: &NpsemSpec,
    policy: &InstrumentPolicy,
    known: &InstrumentDensity,
    cfg: &ReplicationConfig,
    n: usize,
    stream: u64,
) -> Result<Draw> {
    let data = simulate_natural_stream(spec, n, cfg.seed, stream)?;
    let q = fit_outcome_regression(&data, &cfg.outcome)?;
    let plugin = gcomp_estimate(&data, &q, policy)?;
    let est = match cfg.density {
        DensitySource::Known => tmle_estimate(&data, &q, known, policy, &TmleOptions::default())?,
        DensitySource::Estimated => {
            let h = fit_instrument_density(&data)?;
            tmle_estimate(&data, &q, &h, policy, &TmleOptions::default())?
        }
    };
    Ok(Draw {
        tmle: est.psi,
        plugin,
        se: est.se,
    })
}

/// Runs `reps` independent replications at each sample size. Replication
/// `r` of size index `b` always uses stream `(b << 32) | r`, so the report
/// does not depend on thread scheduling.
pub fn replicate_table1(
    spec: &NpsemSpec,
    policy: &InstrumentPolicy,
    cfg: &ReplicationConfig,
) -> Result<ReplicationReport> {
    if cfg.reps == 0 {
        return Err(validation("at least one replication is required"));
    }
    if cfg.n_list.is_empty() || cfg.n_list.contains(&0) {
        return Err(validation("sample sizes must be positive"));
    }
    if cfg.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(validation("alpha levels must lie in (0, 1)"));
    }
    let truth = population_truth(spec, policy)?;
    let known = spec.natural_density()?;
    let crits: Vec<f64> = cfg.alphas.iter().map(|a| normal_critical(*a)).collect();
    let mut rows = Vec::with_capacity(cfg.n_list.len());
    let mut samples = Vec::with_capacity(cfg.n_list.len());
    for (b, &n) in cfg.n_list.iter().enumerate() {
        let draws: Vec<Draw> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| one_replication(spec, policy, &known, cfg, n, replication_stream(b, r)))
            .collect::<Result<_>>()?;
        let tmle: Vec<f64> = draws.iter().map(|d| d.tmle).collect();
        let plugin: Vec<f64> = draws.iter().map(|d| d.plugin).collect();
        let se: Vec<f64> = draws.iter().map(|d| d.se).collect();
        let coverage = crits
            .iter()
            .map(|c| {
                draws
                    .iter()
                    .filter(|d| (d.tmle - truth).abs() <= c * d.se)
                    .count() as f64
                    / cfg.reps as f64
            })
            .collect();
        rows.push(ReplicationRow {
            n,
            mean_tmle: mean(&tmle),
            mean_plugin: mean(&plugin),
            mean_se: mean(&se),
            coverage,
        });
        samples.push(ReplicationSamples { n, tmle, plugin, se });
    }
    Ok(ReplicationReport {
        seed: cfg.seed,
        reps: cfg.reps,
        truth,
        alphas: cfg.alphas.clone(),
        rows,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npsem::simulate_natural;
    use crate::nuisance::OutcomeKind;

    fn toy_policy() -> InstrumentPolicy {
        InstrumentPolicy::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.7, 0.4]).unwrap()
    }

    #[test]
    fn fluctuation_root_solves_score() {
        let ys = [0.1, 0.9, 0.4, 0.7];
        let off = [0.0, 0.5, -1.0, 2.0];
        let w = [1.0, 2.0, 0.5, 1.0];
        let e = solve_fluctuation(&ys, &off, &w).unwrap();
        let s: f64 = (0..4).map(|i| w[i] * (ys[i] - expit(off[i] + e))).sum();
        assert!(s.abs() < 1e-12, "{s}");
    }

    #[test]
    fn point_mass_policy_plugin() {
        let spec = NpsemSpec::toy();
        let d = simulate_natural(&spec, 500, 4).unwrap();
        let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
        let pm = InstrumentPolicy::point_mass(vec![0.0, 1.0], 0.0).unwrap();
        let want: f64 = (0..d.len()).map(|i| q.predict(0.0, d.covariates(i)).unwrap()).sum::<f64>() / d.len() as f64;
        assert!((gcomp_estimate(&d, &q, &pm).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn identity_policy_has_unit_weights() {
        let spec = NpsemSpec::toy();
        let d = simulate_natural(&spec, 300, 9).unwrap();
        let h = fit_instrument_density(&d).unwrap();
        let pol = InstrumentPolicy::from_density(&h);
        let c = row_cache(&d, Some(&h), &pol).unwrap();
        assert!(c.weight.iter().all(|w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn saturated_fit_is_a_targeting_fixed_point() {
        let spec = NpsemSpec::toy();
        let d = simulate_natural(&spec, 2000, 11).unwrap();
        let q = fit_outcome_regression(&d, &OutcomeKind::Saturated).unwrap();
        let h = fit_instrument_density(&d).unwrap();
        let est = tmle_estimate(&d, &q, &h, &toy_policy(), &TmleOptions::default()).unwrap();
        let plug = gcomp_estimate(&d, &q, &toy_policy()).unwrap();
        assert!(est.epsilon.abs() < 1e-6, "{}", est.epsilon);
        assert!((est.psi - plug).abs() < 1e-8);
    }

    #[test]
    fn score_equation_after_targeting() {
        let spec = NpsemSpec::toy();
        let d = simulate_natural(&spec, 1000, 12).unwrap();
        let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
        let est = tmle_estimate(&d, &q, &spec.natural_density().unwrap(), &toy_policy(), &TmleOptions::default()).unwrap();
        assert!(est.mean_eic.abs() < 1e-8 * est.se * (d.len() as f64).sqrt());
        assert!(est.ci.0 <= est.psi && est.psi <= est.ci.1);
    }

    #[test]
    fn positivity_is_enforced() {
        let spec = NpsemSpec::toy();
        let d = simulate_natural(&spec, 100, 1).unwrap();
        let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
        let h = InstrumentDensity::new(
            crate::table::StratifiedTable::new(vec![0], vec![vec![0.0], vec![1.0]], vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.2, 0.8]])
                .unwrap(),
        );
        assert!(matches!(
            tmle_estimate(&d, &q, &h, &toy_policy(), &TmleOptions::default()),
            Err(Error::Positivity(_))
        ));
    }

    #[test]
    fn single_replication_report() {
        let spec = NpsemSpec::toy();
        let cfg = ReplicationConfig {
            n_list: vec![200],
            reps: 1,
            ..ReplicationConfig::default()
        };
        let r = replicate_table1(&spec, &toy_policy(), &cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        for c in &r.rows[0].coverage {
            assert!(*c == 0.0 || *c == 1.0);
        }
        assert_eq!(r, replicate_table1(&spec, &toy_policy(), &cfg).unwrap());
        assert!(r.to_csv(false).lines().count() == 2);
    }
}
