mod common;

use common::{exactness_checks, gradient_suite, infonce_bound, oracle_cases};

#[test]
fn derived_examples_match_their_oracles() {
    let failures: Vec<_> = oracle_cases().into_iter().filter(|c| !c.ok()).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn every_loss_passes_finite_differences() {
    for g in gradient_suite(20) {
        assert!(g.worst < 1e-4, "{} worst relative error {}", g.loss, g.worst);
    }
}

#[test]
fn infonce_never_exceeds_ln_n() {
    for n in [2, 4, 8] {
        let (excess, constant) = infonce_bound(n, 1000);
        assert!(excess <= 1e-12, "N={n} exceeds ln N by {excess}");
        assert!(constant <= 1e-9, "N={n} constant scores give {constant}");
    }
}

#[test]
fn grl_and_stop_gradient_are_exact() {
    let (grl, leak) = exactness_checks();
    assert!(grl);
    assert_eq!(leak, 0.0);
}
