use ovd_core::matching::hungarian_match;
use ovd_core::oracle::{brute_force_min, matcher_mismatches};
use ovd_core::Tensor;

#[test]
fn equals_exhaustive_minimum() {
    let (bad, total) = matcher_mismatches(1000, 7, 0x4d41).unwrap();
    assert_eq!(total, 1000);
    assert_eq!(bad, 0);
}

#[test]
fn tall_and_wide_matrices() {
    let c = Tensor::new(&[3, 2], vec![1.0, 9.0, 9.0, 1.0, 5.0, 5.0]).unwrap();
    let a = hungarian_match(&c).unwrap();
    assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(a.total_cost(&c), brute_force_min(&c));
    let t = Tensor::new(&[2, 3], vec![1.0, 9.0, 5.0, 9.0, 1.0, 5.0]).unwrap();
    assert_eq!(hungarian_match(&t).unwrap().pairs, vec![(0, 0), (1, 1)]);
}

#[test]
fn empty_side_gives_no_pairs() {
    assert!(hungarian_match(&Tensor::zeros(&[0, 4])).unwrap().is_empty());
    assert!(hungarian_match(&Tensor::zeros(&[3, 0])).unwrap().is_empty());
}

#[test]
fn non_finite_cost_rejected() {
    let c = Tensor::new(&[1, 2], vec![1.0, f64::NAN]).unwrap();
    assert!(hungarian_match(&c).is_err());
}
