use ovd_core::loss::{alignment_term, LossWeights};
use ovd_core::oracle::{alignment_loss_gap, scalar_alignment_term};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn matches_scalar_form_on_random_grids() {
    let gap = alignment_loss_gap(1000, 0x1055).unwrap();
    assert!(gap <= 1e-9, "gap {gap}");
}

#[test]
fn documented_values() {
    let w = LossWeights::default();
    assert!((alignment_term(logit(0.5), 1.0, &w) - 0.693147).abs() < 1e-6);
    assert!((alignment_term(logit(0.5), 0.0, &w) - 0.129965).abs() < 1e-6);
    assert!((scalar_alignment_term(0.5, 1.0, 0.75, 2.0) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn positive_term_vanishes_at_target() {
    let w = LossWeights::default();
    // u = θ = 1 up to sigmoid saturation.
    assert!(alignment_term(40.0, 1.0, &w) < 1e-12);
    assert!(alignment_term(-40.0, 0.0, &w) < 1e-12);
}
