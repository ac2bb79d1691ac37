//! Analytic gradients against central finite differences.

mod common;

use common::{primitive_checks, variant_check, GRAD_TOL};
use herbrx_core::model::Variant;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in [1, 2] {
        for (name, err) in primitive_checks(seed) {
            assert!(err <= GRAD_TOL, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn single_channel_network_gradients() {
    for (name, err) in variant_check(Variant::SingleChannel, 11) {
        assert!(err <= GRAD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn dual_channel_network_gradients() {
    for (name, err) in variant_check(Variant::DualChannel, 12) {
        assert!(err <= GRAD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn dual_channel_aux_network_gradients() {
    let errs = variant_check(Variant::DualChannelAux, 13);
    assert!(errs.iter().any(|(n, _)| n.starts_with("aux_out.")));
    for (name, err) in errs {
        assert!(err <= GRAD_TOL, "{name}: relative error {err:e}");
    }
}
