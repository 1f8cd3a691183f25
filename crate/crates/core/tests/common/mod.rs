#![allow(dead_code)]

use implied_core::induced::InducedMarginal;
use implied_core::{InstrumentPolicy, NpsemSpec, OutcomeMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_policy() -> InstrumentPolicy {
    InstrumentPolicy::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.7, 0.4]).unwrap()
}

fn random_pmf(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| 0.05 + r.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Binary-instrument spec on `dim` binary covariates. Kernel rows are drawn
/// away from 0 and 1; about one stratum in ten is a weak-instrument stratum.
pub fn random_binary_spec(r: &mut ChaCha8Rng, dim: usize) -> NpsemSpec {
    let k = 1usize << dim;
    let covariate_values: Vec<Vec<f64>> = (0..k)
        .map(|s| (0..dim).map(|j| ((s >> j) & 1) as f64).collect())
        .collect();
    let instrument_policy = (0..k)
        .map(|_| {
            let p = r.random_range(0.1..0.9);
            vec![1.0 - p, p]
        })
        .collect();
    let mut kernel = vec![vec![0.0; k]; 2];
    for s in 0..k {
        let p0 = r.random_range(0.05..0.95);
        let p1 = if r.random::<f64>() < 0.1 { p0 } else { r.random_range(0.05..0.95) };
        kernel[0][s] = p0;
        kernel[1][s] = p1;
    }
    let outcome_mode = if r.random::<bool>() {
        OutcomeMode::Additive
    } else {
        OutcomeMode::MultiplicativeConfounding
    };
    NpsemSpec {
        covariate_values,
        covariate_pmf: random_pmf(r, k),
        instrument_support: vec![0.0, 1.0],
        instrument_policy,
        treatment_kernel: kernel,
        alpha: r.random_range(-3.0..3.0),
        gamma: (0..dim).map(|_| r.random_range(-2.0..2.0)).collect(),
        delta: r.random_range(-2.0..2.0),
        noise_sd: 0.1,
        outcome_mode,
    }
}

/// Same as [`random_binary_spec`] but `h(z|w) = h(z)` on every stratum.
pub fn randomized_spec(r: &mut ChaCha8Rng, dim: usize) -> NpsemSpec {
    let mut spec = random_binary_spec(r, dim);
    let p = r.random_range(0.1..0.9);
    for row in &mut spec.instrument_policy {
        *row = vec![1.0 - p, p];
    }
    spec
}

/// A Z-compatible binary target: `g* = g0 + t (g1 - g0)` per stratum.
pub fn compatible_target(r: &mut ChaCha8Rng, spec: &NpsemSpec) -> InducedMarginal {
    let p1 = (0..spec.n_strata())
        .map(|s| {
            let (g0, g1) = (spec.kernel_p1(0, s), spec.kernel_p1(1, s));
            g0 + r.random::<f64>() * (g1 - g0)
        })
        .collect();
    InducedMarginal::binary(spec.all_columns(), spec.covariate_values.clone(), p1).unwrap()
}

pub fn random_binary_policy(r: &mut ChaCha8Rng, spec: &NpsemSpec) -> InstrumentPolicy {
    let p1 = (0..spec.n_strata()).map(|_| r.random::<f64>()).collect();
    InstrumentPolicy::binary(spec.all_columns(), spec.covariate_values.clone(), p1).unwrap()
}

/// Exact Euclidean projection onto the simplex by enumerating every support.
pub fn brute_force_simplex(v: &[f64]) -> Vec<f64> {
    let q = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << q) {
        let idx: Vec<usize> = (0..q).filter(|j| mask >> j & 1 == 1).collect();
        let shift = (idx.iter().map(|&j| v[j]).sum::<f64>() - 1.0) / idx.len() as f64;
        let mut x = vec![0.0; q];
        let mut feasible = true;
        for &j in &idx {
            x[j] = v[j] - shift;
            if x[j] < 0.0 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let d: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.expect("the single-vertex supports are never all infeasible").1
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
