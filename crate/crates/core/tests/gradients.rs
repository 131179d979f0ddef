use ovd_core::gradcheck::run_suite;

#[test]
fn every_case_matches_central_differences() {
    let reports = run_suite(100, 0x9d).unwrap();
    let mut bad = Vec::new();
    for c in &reports {
        println!("{:<20} n={:<4} checked={:<7} rel={:.2e}", c.name, c.instances, c.report.checked, c.report.max_rel_err);
        if !(c.report.max_rel_err < 1e-4) {
            bad.push(c.name);
        }
    }
    assert!(bad.is_empty(), "gradient mismatch in {bad:?}");
}
