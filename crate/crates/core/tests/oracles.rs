mod common;

use common::*;
use implied_core::estimators::{
    eic_values, gcomp_estimate, replicate_table1, tmle_estimate, wald_contrast, ReplicationConfig, TmleOptions,
};
use implied_core::induced::{induced_family_reduced, induced_marginal};
use implied_core::math::{mean, sd_population};
use implied_core::npsem::{
    population_truth, simulate_independent_policy, simulate_instrument_intervention, simulate_natural,
};
use implied_core::nuisance::{
    fit_instrument_density, fit_outcome_regression, fit_treatment_kernel, KernelKind, OutcomeKind,
};
use implied_core::{DiscreteJoint, InducedMarginal, InstrumentPolicy, NpsemSpec, OutcomeMode, TreatmentTarget};

const BIG: usize = 1_000_000;

fn treated_share(w: &[f64], a: &[f64], stratum: f64) -> f64 {
    let (mut n, mut t) = (0.0, 0.0);
    for (wi, ai) in w.iter().zip(a) {
        if *wi == stratum {
            n += 1.0;
            t += ai;
        }
    }
    t / n
}

#[test]
fn natural_world_moments() {
    let spec = NpsemSpec::toy();
    let d = simulate_natural(&spec, BIG, 101).unwrap();
    assert!((mean(&d.y) - 0.7248).abs() < 0.005);
    assert!((treated_share(&d.w, &d.a, 0.0) - 0.42).abs() < 0.005);
    assert!((treated_share(&d.w, &d.a, 1.0) - 0.56).abs() < 0.005);

    let k = fit_treatment_kernel(&d, &KernelKind::Tabular).unwrap();
    assert!((k.p1(0.0, &[0.0]).unwrap() - 0.3).abs() < 0.005);
    assert!((k.p1(1.0, &[0.0]).unwrap() - 0.7).abs() < 0.005);
    let h = fit_instrument_density(&d).unwrap();
    assert!((h.prob(1.0, &[0.0]).unwrap() - 0.3).abs() < 0.005);
    assert!((h.prob(1.0, &[1.0]).unwrap() - 0.8).abs() < 0.005);
}

#[test]
fn point_mass_policy_treats_at_kernel_rate() {
    let spec = NpsemSpec::toy();
    let policy = InstrumentPolicy::point_mass(vec![0.0, 1.0], 0.0).unwrap();
    let d = simulate_instrument_intervention(&spec, &policy, BIG, 102).unwrap();
    assert!((treated_share(&d.w, &d.a_star, 0.0) - 0.3).abs() < 0.005);
}

#[test]
fn independent_world_separates_under_multiplicative_confounding() {
    let mut spec = NpsemSpec::toy();
    spec.outcome_mode = OutcomeMode::MultiplicativeConfounding;
    let pol = toy_policy();
    let g = induced_marginal(&spec.kernel().unwrap(), &pol).unwrap();
    let a = simulate_instrument_intervention(&spec, &pol, 200_000, 7).unwrap();
    let b = simulate_independent_policy(&spec, &TreatmentTarget::Binary(g), 200_000, 8).unwrap();
    let se = (a.outcome_se().powi(2) + b.outcome_se().powi(2)).sqrt();
    assert!((a.mean_outcome() - b.mean_outcome()).abs() > 3.0 * se);
}

#[test]
fn invalid_independent_target_is_rejected() {
    let spec = NpsemSpec::toy();
    let bad = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![1.2, 0.5]);
    assert!(bad.is_err() || simulate_independent_policy(&spec, &TreatmentTarget::Binary(bad.unwrap()), 10, 1).is_err());
}

#[test]
fn enumerated_plug_in_with_saturated_regression_is_the_truth() {
    let spec = NpsemSpec::toy();
    let joint = DiscreteJoint::natural(&spec).unwrap();
    let family = induced_family_reduced(&joint, &toy_policy(), &[vec![0]]).unwrap();
    assert!((family.members[0].gcomp - 1.02).abs() < 1e-12);
}

#[test]
fn wald_contrast_on_the_toy() {
    let spec = NpsemSpec::toy();
    let joint = DiscreteJoint::natural(&spec).unwrap();
    let kernel = spec.kernel().unwrap();
    let q = joint.outcome_regression().unwrap();
    let law = joint.covariate_law();
    let g = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.58, 0.68]).unwrap();
    let f = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.42, 0.56]).unwrap();
    let c = wald_contrast(&kernel, &q, &law, &g, &f).unwrap();
    assert!((c - 0.296).abs() < 1e-12, "{c}");
    assert_eq!(wald_contrast(&kernel, &q, &law, &g, &g).unwrap(), 0.0);
    let outside = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.8, 0.6]).unwrap();
    assert!(wald_contrast(&kernel, &q, &law, &outside, &f).is_err());
}

#[test]
fn wald_contrast_skips_weak_instrument_strata() {
    let mut spec = NpsemSpec::toy();
    spec.treatment_kernel = vec![vec![0.3, 0.5], vec![0.7, 0.5]];
    let joint = DiscreteJoint::natural(&spec).unwrap();
    let kernel = spec.kernel().unwrap();
    let g = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.58, 0.5]).unwrap();
    let f = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.42, 0.5]).unwrap();
    let c = wald_contrast(&kernel, &joint.outcome_regression().unwrap(), &joint.covariate_law(), &g, &f).unwrap();
    let only_first = 0.7 * (0.58 - 0.42) * 2.0;
    assert!((c - only_first).abs() < 1e-12, "{c}");
}

#[test]
fn tmle_solves_the_score_equation_on_every_draw() {
    let spec = NpsemSpec::toy();
    let known = spec.natural_density().unwrap();
    for seed in 0..30 {
        let d = simulate_natural(&spec, 300 + 50 * seed as usize, seed).unwrap();
        let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
        let est = tmle_estimate(&d, &q, &known, &toy_policy(), &TmleOptions::default()).unwrap();
        let sd = est.se * (est.n as f64).sqrt();
        assert!(est.mean_eic.abs() < 1e-8 * sd, "seed {seed}: {} vs {sd}", est.mean_eic);
        assert!(est.ci.0 <= est.psi && est.psi <= est.ci.1);
    }
}

#[test]
fn saturated_regression_is_a_targeting_fixed_point() {
    let spec = NpsemSpec::toy();
    let d = simulate_natural(&spec, 5000, 4).unwrap();
    let q = fit_outcome_regression(&d, &OutcomeKind::Saturated).unwrap();
    let h = fit_instrument_density(&d).unwrap();
    let plug = gcomp_estimate(&d, &q, &toy_policy()).unwrap();
    let est = tmle_estimate(&d, &q, &h, &toy_policy(), &TmleOptions::default()).unwrap();
    assert!(est.epsilon.abs() < 1e-8, "{}", est.epsilon);
    assert!((est.psi - plug).abs() < 1e-8);
}

#[test]
fn natural_policy_estimates_the_outcome_mean() {
    let spec = NpsemSpec::toy();
    let d = simulate_natural(&spec, 10_000, 5).unwrap();
    let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
    let h = spec.natural_density().unwrap();
    let est = tmle_estimate(&d, &q, &h, &spec.natural_policy().unwrap(), &TmleOptions::default()).unwrap();
    assert!((est.psi - mean(&d.y)).abs() < 3.0 * est.se);

    let d = simulate_natural(&spec, 10_000, 6).unwrap();
    let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
    let est = tmle_estimate(&d, &q, &h, &toy_policy(), &TmleOptions::default()).unwrap();
    assert!((est.psi - 1.02).abs() < 3.0 * est.se, "{} ± {}", est.psi, est.se);
}

#[test]
fn influence_curve_scale_matches_the_table() {
    let spec = NpsemSpec::toy();
    let d = simulate_natural(&spec, 10_000, 8).unwrap();
    let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
    let h = spec.natural_density().unwrap();
    let psi = gcomp_estimate(&d, &q, &toy_policy()).unwrap();
    let eic = eic_values(&d, &q, &h, &toy_policy(), psi).unwrap();
    let se = sd_population(&eic) / (d.len() as f64).sqrt();
    assert!((se - 0.017).abs() < 0.003, "{se}");
}

#[test]
fn positivity_violation_is_reported() {
    let spec = NpsemSpec::toy();
    let d = simulate_natural(&spec, 200, 9).unwrap();
    let q = fit_outcome_regression(&d, &OutcomeKind::OlsMainEffects).unwrap();
    let mut bad = spec.clone();
    bad.instrument_policy[0] = vec![1.0, 0.0];
    let h = bad.natural_density().unwrap();
    let err = tmle_estimate(&d, &q, &h, &toy_policy(), &TmleOptions::default()).unwrap_err();
    assert!(matches!(err, implied_core::Error::Positivity(_)), "{err}");
}

#[test]
fn replication_is_deterministic_and_scales() {
    let spec = NpsemSpec::toy();
    let cfg = ReplicationConfig {
        n_list: vec![2000, 10_000],
        reps: 200,
        ..ReplicationConfig::default()
    };
    let a = replicate_table1(&spec, &toy_policy(), &cfg).unwrap();
    let b = replicate_table1(&spec, &toy_policy(), &cfg).unwrap();
    assert_eq!(a, b);
    let ratio = a.rows[1].mean_se / (a.rows[0].mean_se * (2000.0f64 / 10_000.0).sqrt());
    assert!((ratio - 1.0).abs() < 0.15, "{ratio}");
    for row in &a.rows {
        assert!(row.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    let one = ReplicationConfig { n_list: vec![100], reps: 1, ..ReplicationConfig::default() };
    let r = replicate_table1(&spec, &toy_policy(), &one).unwrap();
    assert!(r.rows[0].coverage.iter().all(|c| *c == 0.0 || *c == 1.0));
    assert_eq!(r.samples[0].tmle.len(), 1);
    assert!(replicate_table1(&spec, &toy_policy(), &ReplicationConfig { reps: 0, ..one }).is_err());
}

#[test]
fn truth_matches_propagated_world_on_random_specs() {
    let mut r = rng(44);
    for _ in 0..20 {
        let spec = random_binary_spec(&mut r, 2);
        let policy = random_binary_policy(&mut r, &spec);
        let a = population_truth(&spec, &policy).unwrap();
        let b = implied_core::npsem::propagated_world_mean(&spec, &policy).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
