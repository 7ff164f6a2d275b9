//! Equilibrium, marginal emissions and Monte-Carlo validation on the
//! bundled fixtures.

mod common;

use proptest::prelude::*;

use common::fixture;
use dlrm_core::analysis::{equilibrium_multi, equilibrium_single, lme_single, monte_carlo_multi, monte_carlo_single};
use dlrm_core::grid::SystemCase;
use dlrm_core::market_multi::{successive_linearization, MultiPeriodConfig};
use dlrm_core::market_single::{build_single, solve_built_single, solve_single, RatingMode, SinglePeriodConfig};
use dlrm_core::uncertainty::case_covariances;

fn scaled(name: &str, scale: f64) -> SystemCase {
    let mut case = fixture(name);
    for n in &mut case.nodes {
        for d in &mut n.load_mw {
            *d *= scale;
        }
    }
    case
}

fn mode() -> impl Strategy<Value = RatingMode> {
    prop_oneof![Just(RatingMode::Slr), Just(RatingMode::Dlr), Just(RatingMode::CcDlr)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn single_period_dispatch_is_an_equilibrium(eps in 0.01f64..0.2, scale in 0.7f64..1.05, mode in mode()) {
        let case = scaled("three_bus_congested.json", scale);
        let jcs = case_covariances(&case).unwrap();
        let r = solve_single(&case, &jcs[0], &SinglePeriodConfig::new(eps, mode)).unwrap();
        let eq = equilibrium_single(&case, &r).unwrap();
        prop_assert!(eq.max_relative_gap <= 1e-4, "{:?}", eq);
        prop_assert!(eq.generators.iter().all(|g| g.relative_gap >= -1e-6));
        prop_assert!(eq.balance_residual <= 1e-6);
        prop_assert!(eq.participation_residual <= 1e-9);
    }

    #[test]
    fn multi_period_dispatch_is_an_equilibrium(eps in 0.02f64..0.2, scale in 0.8f64..1.0, mode in mode()) {
        let case = scaled("three_bus_transient.json", scale);
        let jcs = case_covariances(&case).unwrap();
        let r = successive_linearization(&case, &jcs, &MultiPeriodConfig::new(eps, mode)).unwrap().result;
        let eq = equilibrium_multi(&case, &r).unwrap();
        prop_assert!(eq.max_relative_gap <= 1e-4, "{:?}", eq);
        prop_assert!(eq.balance_residual <= 1e-6);
        prop_assert!(eq.participation_residual <= 1e-9);
    }
}

#[test]
fn marginal_emissions_match_a_perturbed_resolve() {
    let case = fixture("three_bus_congested.json");
    let jcs = case_covariances(&case).unwrap();
    for mode in RatingMode::ALL {
        let cfg = SinglePeriodConfig::new(0.05, mode);
        let sp = build_single(&case, &jcs[0], &cfg).unwrap();
        let r = solve_built_single(&case, &sp).unwrap();
        let report = lme_single(&case, &sp, &jcs[0], &r).unwrap();
        for (i, entry) in report.entries.iter().enumerate() {
            assert!(!entry.no_marginal_unit, "{mode:?} {entry:?}");
            let mut bumped = case.clone();
            bumped.nodes[i].load_mw[0] += 1.0;
            let r2 = solve_single(&bumped, &jcs[0], &cfg).unwrap();
            let delta: f64 = case.generators.iter().enumerate().map(|(g, u)| u.emission_rate * (r2.p[g] - r.p[g])).sum();
            assert!((delta - entry.lme).abs() <= 0.05 * entry.lme.abs(), "{mode:?} node {i}: {delta} vs {}", entry.lme);
        }
    }
}

#[test]
fn marginal_emissions_differ_across_the_bottleneck() {
    let case = fixture("three_bus_congested.json");
    let jcs = case_covariances(&case).unwrap();
    for mode in RatingMode::ALL {
        let sp = build_single(&case, &jcs[0], &SinglePeriodConfig::new(0.05, mode)).unwrap();
        let r = solve_built_single(&case, &sp).unwrap();
        let lme = lme_single(&case, &sp, &jcs[0], &r).unwrap();
        let (n1, n3) = (lme.entries[0].lme, lme.entries[2].lme);
        assert!((n1 - n3).abs() > 0.1, "{mode:?}: {n1} vs {n3}");
    }
}

#[test]
fn zero_variance_model_never_violates() {
    let case = fixture("three_bus_deterministic.json");
    let jcs = case_covariances(&case).unwrap();
    for mode in RatingMode::ALL {
        let r = solve_single(&case, &jcs[0], &SinglePeriodConfig::new(0.05, mode)).unwrap();
        assert_eq!(monte_carlo_single(&case, &jcs[0], &r, 10_000, 1).unwrap().max_rate, 0.0);
        let out = successive_linearization(&case, &jcs, &MultiPeriodConfig::new(0.05, mode)).unwrap();
        assert_eq!(monte_carlo_multi(&case, &jcs, &out, 10_000, 1).unwrap().max_rate, 0.0);
    }
}

#[test]
fn single_period_rates_stay_near_epsilon() {
    let case = fixture("three_bus_congested.json");
    let jcs = case_covariances(&case).unwrap();
    for mode in RatingMode::ALL {
        let r = solve_single(&case, &jcs[0], &SinglePeriodConfig::new(0.05, mode)).unwrap();
        let report = monte_carlo_single(&case, &jcs[0], &r, 20_000, 7).unwrap();
        assert!(report.max_rate <= 0.06, "{mode:?}: {:?}", report.rows);
        for row in &report.rows {
            assert!(row.ci_low <= row.rate && row.rate <= row.ci_high);
        }
    }
}

#[test]
fn validation_is_reproducible_for_a_seed() {
    let case = fixture("three_bus_congested.json");
    let jcs = case_covariances(&case).unwrap();
    let r = solve_single(&case, &jcs[0], &SinglePeriodConfig::new(0.05, RatingMode::CcDlr)).unwrap();
    let a = monte_carlo_single(&case, &jcs[0], &r, 12_345, 9).unwrap();
    let b = monte_carlo_single(&case, &jcs[0], &r, 12_345, 9).unwrap();
    assert_eq!(a, b);
}
