mod common;

use common::*;
use implied_core::induced::{
    implied_policy_for_target, induced_family_reduced, induced_marginal, induced_marginal_bayes, z_compatible,
};
use implied_core::ls::{descent_direction, ls_project, ls_risk, project_simplex, PgdOptions};
use implied_core::table::StratifiedTable;
use implied_core::{BMatrix, ConditionalKernel, DiscreteJoint, InducedMarginal, InstrumentPolicy};
use proptest::prelude::*;

fn simplex_point(q: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, q).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

/// Column-stochastic `q x q` operator (each column a pmf over treatment values).
fn stochastic_b(q: usize) -> impl Strategy<Value = BMatrix> {
    prop::collection::vec(simplex_point(q), q).prop_map(move |cols| {
        let entries = (0..q).map(|a| (0..q).map(|z| cols[z][a]).collect()).collect();
        BMatrix::from_entries(entries).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simplex_projection_matches_brute_force(v in prop::collection::vec(-3.0f64..3.0, 1..=6)) {
        let p = project_simplex(&v);
        prop_assert!(max_abs_diff(&p, &brute_force_simplex(&v)) <= 1e-10);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn simplex_projection_is_idempotent(v in simplex_point(5)) {
        prop_assert!(max_abs_diff(&project_simplex(&v), &v) <= 1e-12);
    }

    #[test]
    fn descent_direction_is_the_risk_gradient(
        entries in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 3),
        g in prop::collection::vec(0.0f64..1.0, 3),
        h in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let b = BMatrix::from_entries(entries).unwrap();
        let d = descent_direction(&b, &g, &h).unwrap();
        let step = 1e-5;
        for j in 0..3 {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[j] += step;
            hm[j] -= step;
            let fd = (ls_risk(&b, &g, &hp, None).unwrap() - ls_risk(&b, &g, &hm, None).unwrap()) / (2.0 * step);
            prop_assert!((fd - d[j]).abs() <= 1e-6 * d[j].abs().max(1.0));
        }
    }

    #[test]
    fn b_maps_densities_to_densities(b in stochastic_b(4), h in simplex_point(4)) {
        let g = b.apply(&h).unwrap();
        prop_assert!(g.iter().all(|x| *x >= -1e-15));
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn pgd_stays_feasible_and_descends(b in stochastic_b(3), g in simplex_point(3), h0 in simplex_point(3)) {
        let opts = PgdOptions { max_iter: 5000, ..PgdOptions::default() };
        let (state, implied) = ls_project(&b, &g, &h0, &opts).unwrap();
        prop_assert!(state.h.iter().all(|x| *x >= 0.0));
        prop_assert!((state.h.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(state.risk_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(max_abs_diff(&implied, &b.apply(&state.h).unwrap()) <= 1e-15);
        if state.converged {
            let d = descent_direction(&b, &g, &state.h).unwrap();
            let moved: Vec<f64> = state.h.iter().zip(&d).map(|(h, d)| h - state.step * d).collect();
            prop_assert!(max_abs_diff(&project_simplex(&moved), &state.h) <= 1e-6);
        }
    }

    #[test]
    fn induced_marginal_is_linear_in_the_policy(seed in any::<u64>(), lam in 0.0f64..1.0) {
        let mut r = rng(seed);
        let spec = random_binary_spec(&mut r, 2);
        let kernel = spec.kernel().unwrap();
        let h1 = random_binary_policy(&mut r, &spec);
        let h2 = random_binary_policy(&mut r, &spec);
        let mix: Vec<f64> = spec
            .covariate_values
            .iter()
            .map(|w| lam * h1.p1(w).unwrap() + (1.0 - lam) * h2.p1(w).unwrap())
            .collect();
        let hm = InstrumentPolicy::binary(spec.all_columns(), spec.covariate_values.clone(), mix).unwrap();
        let g1 = induced_marginal(&kernel, &h1).unwrap().p1_rows();
        let g2 = induced_marginal(&kernel, &h2).unwrap().p1_rows();
        let gm = induced_marginal(&kernel, &hm).unwrap().p1_rows();
        for s in 0..gm.len() {
            prop_assert!((gm[s] - (lam * g1[s] + (1.0 - lam) * g2[s])).abs() <= 1e-12);
        }
    }

    #[test]
    fn bayes_form_equals_direct_form(seed in any::<u64>(), dim in 1usize..=3) {
        let mut r = rng(seed);
        let spec = random_binary_spec(&mut r, dim);
        let joint = DiscreteJoint::natural(&spec).unwrap();
        let policy = random_binary_policy(&mut r, &spec);
        let direct = induced_marginal(&joint.kernel().unwrap(), &policy).unwrap();
        let bayes = induced_marginal_bayes(
            &joint.observed_marginal().unwrap(),
            &joint.density().unwrap(),
            &policy,
            &joint.posterior_tables().unwrap(),
        )
        .unwrap();
        prop_assert!(max_abs_diff(&direct.p1_rows(), &bayes.p1_rows()) <= 1e-12);
        for row in bayes.table().values() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn natural_policy_reproduces_observational_marginal(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_binary_spec(&mut r, 2);
        let joint = DiscreteJoint::natural(&spec).unwrap();
        let g = induced_marginal(&spec.kernel().unwrap(), &spec.natural_policy().unwrap()).unwrap();
        prop_assert!(max_abs_diff(&g.p1_rows(), &joint.observed_marginal().unwrap().p1_rows()) <= 1e-12);
    }

    #[test]
    fn implied_policy_round_trips(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_binary_spec(&mut r, 2);
        let kernel = spec.kernel().unwrap();
        let h = random_binary_policy(&mut r, &spec);
        let g = induced_marginal(&kernel, &h).unwrap();
        prop_assert!(z_compatible(&g, &kernel).unwrap().compatible);
        let back = implied_policy_for_target(&g, &kernel, &spec.natural_density().unwrap()).unwrap();
        for (s, w) in spec.covariate_values.iter().enumerate() {
            if spec.kernel_p1(0, s) != spec.kernel_p1(1, s) {
                prop_assert!((back.p1(w).unwrap() - h.p1(w).unwrap()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn weak_instrument_collapses_the_range(g in 0.0f64..1.0, p in 0.0f64..1.0) {
        let kernel = ConditionalKernel::tabular(StratifiedTable::constant(vec![0.0, 1.0], vec![g, g]).unwrap());
        let policy = InstrumentPolicy::constant(vec![0.0, 1.0], vec![1.0 - p, p]).unwrap();
        let out = induced_marginal(&kernel, &policy).unwrap();
        prop_assert!((out.p1_rows()[0] - g).abs() <= 1e-15);
    }

    #[test]
    fn reduced_family_agrees_under_marginal_randomization(seed in any::<u64>(), p0 in 0.0f64..1.0, p1 in 0.0f64..1.0) {
        let mut r = rng(seed);
        let spec = randomized_spec(&mut r, 2);
        let joint = DiscreteJoint::natural(&spec).unwrap();
        let policy = InstrumentPolicy::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![p0, p1]).unwrap();
        let family = induced_family_reduced(&joint, &policy, &[vec![0], vec![0, 1]]).unwrap();
        prop_assert!(family.randomized(1e-12));
        prop_assert!(family.max_disagreement <= 1e-12);
    }

    #[test]
    fn compatible_targets_are_reported_compatible(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = random_binary_spec(&mut r, 1);
        let g = compatible_target(&mut r, &spec);
        prop_assert!(z_compatible(&g, &spec.kernel().unwrap()).unwrap().compatible);
    }
}

#[test]
fn non_injective_b_gives_identical_implied_marginals() {
    // Two identical columns: h and its swap on those columns induce the same g.
    let b = BMatrix::from_entries(vec![vec![0.2, 0.2, 0.6], vec![0.8, 0.8, 0.4]]).unwrap();
    let h1 = [0.5, 0.1, 0.4];
    let h2 = [0.1, 0.5, 0.4];
    assert!(max_abs_diff(&b.apply(&h1).unwrap(), &b.apply(&h2).unwrap()) < 1e-15);
    for g in [[0.3, 0.7], [0.9, 0.1], [0.5, 0.5]] {
        let r1 = ls_risk(&b, &g, &h1, None).unwrap();
        let r2 = ls_risk(&b, &g, &h2, None).unwrap();
        assert!((r1 - r2).abs() < 1e-15);
    }
}

#[test]
fn covariate_dependent_instrument_breaks_reduced_family() {
    let mut spec = implied_core::NpsemSpec::toy();
    spec.covariate_values = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
    spec.covariate_pmf = vec![0.25; 4];
    spec.instrument_policy = vec![vec![0.9, 0.1], vec![0.1, 0.9], vec![0.5, 0.5], vec![0.3, 0.7]];
    spec.treatment_kernel = vec![vec![0.2, 0.3, 0.4, 0.5], vec![0.9, 0.6, 0.8, 0.7]];
    spec.gamma = vec![1.0, 3.0];
    let joint = DiscreteJoint::natural(&spec).unwrap();
    let policy = InstrumentPolicy::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.8, 0.2]).unwrap();
    let family = induced_family_reduced(&joint, &policy, &[vec![0], vec![0, 1]]).unwrap();
    assert!(!family.randomized(1e-12));
    assert!(family.max_disagreement > 1e-3, "{}", family.max_disagreement);
    assert!(induced_family_reduced(&joint, &policy, &[vec![1]]).is_err());
}

#[test]
fn induced_rows_sum_to_one_for_user_targets() {
    let g = InducedMarginal::binary(vec![0], vec![vec![0.0], vec![1.0]], vec![0.25, 1.0]).unwrap();
    for row in g.table().values() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
