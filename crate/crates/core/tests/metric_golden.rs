use ovd_core::boxes::BoxCxcywh;
use ovd_core::metrics::{
    average_precision, evaluate, harmonic_mean, recall_at, Detection, EvalConfig, GtInstance, Protocol,
};
use ovd_core::text::{ClassRole, ClassVocabulary};

const HIT: BoxCxcywh = [0.5, 0.5, 0.2, 0.2];
const MISS: BoxCxcywh = [0.1, 0.1, 0.05, 0.05];

fn det(image_id: u64, class: usize, bbox: BoxCxcywh, score: f64) -> Detection {
    Detection { image_id, class, bbox, score }
}

fn gt(image_id: u64, class: usize, bbox: BoxCxcywh) -> GtInstance {
    GtInstance { image_id, class, bbox }
}

#[test]
fn hand_derived_ap() {
    let g = [gt(0, 0, HIT)];
    assert_eq!(average_precision(&[det(0, 0, HIT, 0.9)], &g, 0.5), Some(1.0));
    assert_eq!(average_precision(&[det(0, 0, HIT, 0.9), det(0, 0, MISS, 0.8)], &g, 0.5), Some(1.0));
    assert_eq!(average_precision(&[det(0, 0, MISS, 0.9), det(0, 0, HIT, 0.8)], &g, 0.5), Some(0.5));
    assert_eq!(average_precision(&[], &[], 0.5), None);
}

#[test]
fn hm_values() {
    assert_eq!(harmonic_mean(0.8, 0.2), 0.32);
    assert_eq!(harmonic_mean(0.37, 0.37), 0.37);
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn recall_counts() {
    let g = [gt(0, 0, HIT), gt(1, 0, HIT), gt(2, 0, HIT)];
    assert_eq!(recall_at(&[], &g, 0.5), Some(0.0));
    let d = [det(0, 0, HIT, 0.9), det(1, 0, HIT, 0.8)];
    assert_eq!(recall_at(&d, &g, 0.5), Some(2.0 / 3.0));
}

#[test]
fn duplicate_is_a_false_positive() {
    let g = [gt(0, 0, HIT)];
    let d = [det(0, 0, HIT, 0.9), det(0, 0, HIT, 0.95)];
    assert_eq!(average_precision(&d, &g, 0.5), Some(1.0));
    let d = [det(0, 0, MISS, 0.99), det(0, 0, HIT, 0.9), det(0, 0, HIT, 0.8)];
    assert_eq!(average_precision(&d, &g, 0.5), Some(0.5));
}

#[test]
fn gzsd_rollup() {
    let vocab = ClassVocabulary::new(&[("a", ClassRole::Base), ("b", ClassRole::Novel)]).unwrap();
    let g = [gt(0, 0, HIT), gt(1, 1, HIT)];
    let d = [det(0, 0, HIT, 0.9), det(1, 1, MISS, 0.9), det(1, 1, HIT, 0.8)];
    let r = evaluate(&d, &g, &vocab, &EvalConfig::with_protocol(Protocol::Gzsd)).unwrap();
    assert_eq!(r.base.unwrap().ap50, 1.0);
    assert_eq!(r.novel.unwrap().ap50, 0.5);
    assert_eq!(r.hm.unwrap().ap50, harmonic_mean(1.0, 0.5));
    let z = evaluate(&d, &g, &vocab, &EvalConfig::with_protocol(Protocol::Zsd)).unwrap();
    assert!(z.classes.iter().all(|c| c.role == ClassRole::Novel));
}

#[test]
fn closed_on_all_base_is_plain_mean() {
    let vocab = ClassVocabulary::new(&[("a", ClassRole::Base), ("b", ClassRole::Base)]).unwrap();
    let g = [gt(0, 0, HIT), gt(0, 1, HIT)];
    let d = [det(0, 0, HIT, 0.9), det(0, 1, MISS, 0.9), det(0, 1, HIT, 0.8)];
    let r = evaluate(&d, &g, &vocab, &EvalConfig::with_protocol(Protocol::Closed)).unwrap();
    assert_eq!(r.overall.ap50, 0.75);
    assert!(evaluate(&d, &g, &vocab, &EvalConfig::with_protocol(Protocol::Zsd)).is_err());
}
