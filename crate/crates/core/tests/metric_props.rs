use ovd_core::metrics::{average_precision, recall_at, Detection, GtInstance};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (0.2f64..0.8, 0.2f64..0.8, 0.05f64..0.3, 0.05f64..0.3).prop_map(|(a, b, c, d)| [a, b, c, d])
}

fn scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GtInstance>)> {
    let gts = prop::collection::vec((0u64..3, 0usize..2, boxes()), 1..6);
    let dets = prop::collection::vec((0u64..3, 0usize..2, boxes(), 0.0f64..1.0), 0..10);
    (dets, gts).prop_map(|(d, g)| {
        (
            d.into_iter()
                .map(|(image_id, class, bbox, score)| Detection { image_id, class, bbox, score })
                .collect(),
            g.into_iter().map(|(image_id, class, bbox)| GtInstance { image_id, class, bbox }).collect(),
        )
    })
}

proptest! {
    #[test]
    fn ap_depends_only_on_rank((dets, gts) in scene()) {
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..*d })
            .collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&squashed, &gts, 0.5));
    }

    #[test]
    fn stricter_threshold_never_helps((dets, gts) in scene(), lo in 0.1f64..0.6, step in 0.05f64..0.35) {
        let hi = lo + step;
        prop_assert!(average_precision(&dets, &gts, hi).unwrap() <= average_precision(&dets, &gts, lo).unwrap() + 1e-12);
        prop_assert!(recall_at(&dets, &gts, hi).unwrap() <= recall_at(&dets, &gts, lo).unwrap() + 1e-12);
    }
}
