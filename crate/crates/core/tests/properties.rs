use ovd_core::oracle::{gate_report, masking_gap, permutation_report};

#[test]
fn padding_slots_change_nothing() {
    let gap = masking_gap(50, 0x3a5c).unwrap();
    assert!(gap < 1e-9, "gap {gap}");
}

#[test]
fn slot_permutation_is_equivariant() {
    let r = permutation_report(50, 0x9e12).unwrap();
    assert!(r.score_gap < 1e-9, "{r:?}");
    assert!(r.box_gap < 1e-9, "{r:?}");
    assert_eq!(r.token_set_changes, 0);
}

#[test]
fn gate_limits() {
    let r = gate_report(7).unwrap();
    assert!(r.feature_gap < 1e-6 && r.query_gap < 1e-6, "{r:?}");
    assert!(r.ungated_gap > 1e-3, "{r:?}");
    assert!(r.zero_value_identity);
}
