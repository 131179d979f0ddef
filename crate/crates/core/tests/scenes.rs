use std::collections::BTreeMap;

use ovd_core::scene::{generate_scenes, Partition, SceneSpec};

fn spec(novel: &[&str]) -> SceneSpec {
    SceneSpec {
        novel: novel.iter().map(|s| s.to_string()).collect(),
        seed: 11,
        ..SceneSpec::default()
    }
}

#[test]
fn zero_scenes_is_empty() {
    assert!(generate_scenes(&spec(&[]), Partition::Train, 0).unwrap().is_empty());
}

#[test]
fn same_seed_same_scenes() {
    let a = generate_scenes(&spec(&[]), Partition::Eval, 5).unwrap();
    let b = generate_scenes(&spec(&[]), Partition::Eval, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn novel_class_only_in_eval() {
    let s = spec(&["red triangle"]);
    let train = generate_scenes(&s, Partition::Train, 100).unwrap();
    let eval = generate_scenes(&s, Partition::Eval, 20).unwrap();
    let count = |xs: &[ovd_core::scene::Scene]| {
        xs.iter()
            .flat_map(|sc| &sc.record.objects)
            .filter(|o| o.class_name == "red triangle")
            .count()
    };
    assert_eq!(count(&train), 0);
    assert!(count(&eval) >= 1);
}

#[test]
fn objects_stay_inside_the_canvas() {
    for sc in generate_scenes(&spec(&[]), Partition::Train, 50).unwrap() {
        for o in &sc.record.objects {
            let [x, y, w, h] = o.bbox;
            assert!(x >= 0.0 && y >= 0.0 && w > 0.0 && h > 0.0);
            assert!(x + w <= sc.record.width as f64 && y + h <= sc.record.height as f64);
        }
    }
}

#[test]
fn training_classes_are_balanced() {
    let s = spec(&["red triangle", "blue ring"]);
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for sc in generate_scenes(&s, Partition::Train, 500).unwrap() {
        for o in sc.record.objects {
            *freq.entry(o.class_name).or_default() += 1;
        }
    }
    let vocab = s.vocabulary().unwrap();
    let base = vocab.indices_with_role(ovd_core::text::ClassRole::Base);
    let total: usize = freq.values().sum();
    let uniform = total as f64 / base.len() as f64;
    for c in base {
        let n = freq.get(vocab.name(c)).copied().unwrap_or(0) as f64;
        assert!((n - uniform).abs() <= 0.5 * uniform, "{} seen {n} times, uniform {uniform}", vocab.name(c));
    }
}

#[test]
fn unknown_novel_name_rejected() {
    assert!(generate_scenes(&spec(&["plaid hexagon"]), Partition::Train, 1).is_err());
}
