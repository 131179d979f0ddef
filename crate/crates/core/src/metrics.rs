//! Detection metrics: AP with all-point interpolation, recall, and the
//! zero-shot protocols.
//!
//! Matching is greedy per class in descending score order (ties keep
//! insertion order): a detection takes the highest-IoU unmatched ground
//! truth of its class in its image when that IoU reaches the threshold,
//! otherwise it is a false positive. Classes without ground truth are left
//! out of every mean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{iou, BoxCxcywh};
use crate::error::{Error, Result};
use crate::text::{ClassRole, ClassVocabulary};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BoxCxcywh,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtInstance {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BoxCxcywh,
}

/// True-positive flag of every detection in ranked order, plus the number of
/// ground-truth instances. Only same-class, same-image pairs can match.
fn rank_and_match(dets: &[Detection], gts: &[GtInstance], thr: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let flags = order
        .iter()
        .map(|&d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != det.image_id || gt.class != det.class {
                    continue;
                }
                let o = iou(det.bbox, gt.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o >= thr => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, gts.len())
}

/// Area under the monotone precision envelope. `None` without ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Option<f64> {
    let (flags, n_gt) = rank_and_match(dets, gts, iou_thr);
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let step = 1.0 / n_gt as f64;
    Some(
        flags
            .iter()
            .zip(&precision)
            .filter(|(f, _)| **f)
            .map(|(_, p)| p * step)
            .sum(),
    )
}

/// Matched ground truth over all ground truth. `None` without ground truth.
pub fn recall_at(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Option<f64> {
    let (flags, n_gt) = rank_and_match(dets, gts, iou_thr);
    (n_gt > 0).then(|| flags.iter().filter(|&&f| f).count() as f64 / n_gt as f64)
}

/// `2ab / (a + b)`, 0 when either side is 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else if a == b {
        a
    } else {
        2.0 / (1.0 / a + 1.0 / b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Novel classes only.
    Zsd,
    /// All classes, reported per split with the harmonic mean.
    Gzsd,
    /// All classes, plain means.
    Closed,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Zsd => "zsd",
            Protocol::Gzsd => "gzsd",
            Protocol::Closed => "closed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsd" => Ok(Protocol::Zsd),
            "gzsd" => Ok(Protocol::Gzsd),
            "closed" => Ok(Protocol::Closed),
            other => Err(Error::Protocol(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Thresholds averaged into mAP.
    pub iou_thresholds: Vec<f64>,
    pub protocol: Protocol,
    pub score_floor: f64,
}

/// 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn new(iou_thresholds: Vec<f64>, protocol: Protocol, score_floor: f64) -> Result<Self> {
        if iou_thresholds.is_empty() {
            return Err(Error::Contract("at least one IoU threshold is needed".into()));
        }
        for w in iou_thresholds.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Contract("IoU thresholds must be strictly increasing".into()));
            }
        }
        if iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Contract("IoU thresholds must lie in (0, 1]".into()));
        }
        Ok(Self {
            iou_thresholds,
            protocol,
            score_floor,
        })
    }

    pub fn with_protocol(protocol: Protocol) -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            protocol,
            score_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub role: ClassRole,
    pub num_gt: usize,
    /// `None` for classes without ground truth.
    pub ap50: Option<f64>,
    pub recall50: Option<f64>,
    pub map: Option<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub recall_per_threshold: Vec<f64>,
    matched50: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitMetrics {
    pub ap50: f64,
    pub map: f64,
    /// Mean of per-class recall at IoU 0.5.
    pub recall: f64,
    /// Pooled recall at IoU 0.5.
    pub recall_micro: f64,
    pub classes_scored: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    pub overall: SplitMetrics,
    pub base: Option<SplitMetrics>,
    pub novel: Option<SplitMetrics>,
    /// Harmonic mean of base and novel, per metric (GZSD only).
    pub hm: Option<SplitMetrics>,
}

fn aggregate<'a>(classes: impl Iterator<Item = &'a ClassReport>) -> SplitMetrics {
    let scored: Vec<&ClassReport> = classes.filter(|c| c.num_gt > 0).collect();
    if scored.is_empty() {
        return SplitMetrics::default();
    }
    let n = scored.len() as f64;
    let mean = |f: &dyn Fn(&ClassReport) -> f64| scored.iter().map(|c| f(c)).sum::<f64>() / n;
    let total_gt: usize = scored.iter().map(|c| c.num_gt).sum();
    let matched: usize = scored.iter().map(|c| c.matched50).sum();
    let thresholds = scored[0].ap_per_threshold.len();
    let map = (0..thresholds)
        .map(|t| scored.iter().map(|c| c.ap_per_threshold[t]).sum::<f64>() / n)
        .sum::<f64>()
        / thresholds.max(1) as f64;
    SplitMetrics {
        ap50: mean(&|c| c.ap50.unwrap_or(0.0)),
        map,
        recall: mean(&|c| c.recall50.unwrap_or(0.0)),
        recall_micro: matched as f64 / total_gt as f64,
        classes_scored: scored.len(),
    }
}

pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GtInstance],
    vocab: &ClassVocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if let Some(d) = detections.iter().find(|d| d.class >= vocab.len()) {
        return Err(Error::Contract(format!("detection class {} outside the vocabulary", d.class)));
    }
    if let Some(g) = ground_truth.iter().find(|g| g.class >= vocab.len()) {
        return Err(Error::Contract(format!("ground-truth class {} outside the vocabulary", g.class)));
    }
    let base = vocab.indices_with_role(ClassRole::Base);
    let novel = vocab.indices_with_role(ClassRole::Novel);
    let in_scope: Vec<usize> = match cfg.protocol {
        Protocol::Zsd => {
            if novel.is_empty() {
                return Err(Error::Protocol("ZSD needs at least one novel class".into()));
            }
            novel.clone()
        }
        Protocol::Gzsd => {
            if novel.is_empty() || base.is_empty() {
                return Err(Error::Protocol("GZSD needs both base and novel classes".into()));
            }
            (0..vocab.len()).collect()
        }
        Protocol::Closed => (0..vocab.len()).collect(),
    };

    let mut classes = Vec::with_capacity(in_scope.len());
    for &c in &in_scope {
        let dets: Vec<Detection> = detections
            .iter()
            .filter(|d| d.class == c && d.score >= cfg.score_floor)
            .copied()
            .collect();
        let gts: Vec<GtInstance> = ground_truth.iter().filter(|g| g.class == c).copied().collect();
        let ap_per_threshold: Vec<f64> = cfg
            .iou_thresholds
            .iter()
            .map(|&t| average_precision(&dets, &gts, t).unwrap_or(0.0))
            .collect();
        let recall_per_threshold: Vec<f64> = cfg
            .iou_thresholds
            .iter()
            .map(|&t| recall_at(&dets, &gts, t).unwrap_or(0.0))
            .collect();
        let (flags, _) = rank_and_match(&dets, &gts, 0.5);
        let has_gt = !gts.is_empty();
        classes.push(ClassReport {
            class: c,
            name: vocab.name(c).into(),
            role: vocab.role(c),
            num_gt: gts.len(),
            ap50: average_precision(&dets, &gts, 0.5),
            recall50: recall_at(&dets, &gts, 0.5),
            map: has_gt.then(|| ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64),
            ap_per_threshold,
            recall_per_threshold,
            matched50: flags.iter().filter(|&&f| f).count(),
        });
    }

    let overall = aggregate(classes.iter());
    let (base_m, novel_m, hm) = match cfg.protocol {
        Protocol::Gzsd => {
            let b = aggregate(classes.iter().filter(|c| c.role == ClassRole::Base));
            let n = aggregate(classes.iter().filter(|c| c.role == ClassRole::Novel));
            let hm = SplitMetrics {
                ap50: harmonic_mean(b.ap50, n.ap50),
                map: harmonic_mean(b.map, n.map),
                recall: harmonic_mean(b.recall, n.recall),
                recall_micro: harmonic_mean(b.recall_micro, n.recall_micro),
                classes_scored: b.classes_scored + n.classes_scored,
            };
            (Some(b), Some(n), Some(hm))
        }
        Protocol::Zsd => (None, Some(overall), None),
        Protocol::Closed => (None, None, None),
    };
    Ok(EvalReport {
        protocol: cfg.protocol,
        iou_thresholds: cfg.iou_thresholds.clone(),
        classes,
        overall,
        base: base_m,
        novel: novel_m,
        hm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(score: f64, bbox: BoxCxcywh) -> Detection {
        Detection {
            image_id: 0,
            class: 0,
            bbox,
            score,
        }
    }

    const GT_BOX: BoxCxcywh = [0.5, 0.5, 0.2, 0.2];
    const FAR: BoxCxcywh = [0.1, 0.1, 0.05, 0.05];

    fn gt() -> Vec<GtInstance> {
        vec![GtInstance {
            image_id: 0,
            class: 0,
            bbox: GT_BOX,
        }]
    }

    #[test]
    fn hand_built_pr_curves() {
        assert_eq!(average_precision(&[det(0.7, GT_BOX)], &gt(), 0.5), Some(1.0));
        assert_eq!(average_precision(&[det(0.9, GT_BOX), det(0.8, FAR)], &gt(), 0.5), Some(1.0));
        assert_eq!(average_precision(&[det(0.9, FAR), det(0.8, GT_BOX)], &gt(), 0.5), Some(0.5));
        assert_eq!(average_precision(&[det(0.9, GT_BOX)], &[], 0.5), None);
    }

    #[test]
    fn duplicates_are_false_positives() {
        let dets = [det(0.9, GT_BOX), det(0.8, GT_BOX)];
        let (flags, _) = rank_and_match(&dets, &gt(), 0.5);
        assert_eq!(flags, [true, false]);
    }

    #[test]
    fn recall_counts() {
        let gts: Vec<GtInstance> = (0..3)
            .map(|i| GtInstance {
                image_id: i,
                class: 0,
                bbox: GT_BOX,
            })
            .collect();
        let dets = [
            Detection { image_id: 0, class: 0, bbox: GT_BOX, score: 0.5 },
            Detection { image_id: 1, class: 0, bbox: GT_BOX, score: 0.5 },
        ];
        assert!((recall_at(&dets, &gts, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at(&[], &gts, 0.5), Some(0.0));
        assert_eq!(recall_at(&dets, &gts[..2], 0.5), Some(1.0));
    }

    #[test]
    fn harmonic_mean_values() {
        assert_eq!(harmonic_mean(0.8, 0.2), 0.32);
        assert_eq!(harmonic_mean(0.4, 0.4), 0.4);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.5, 0.0), 0.0);
    }

    #[test]
    fn protocols_need_their_splits() {
        let vocab = ClassVocabulary::open(&["a", "b"]).unwrap();
        let zsd = EvalConfig::with_protocol(Protocol::Zsd);
        assert!(matches!(evaluate(&[], &[], &vocab, &zsd), Err(Error::Protocol(_))));
        let gzsd = EvalConfig::with_protocol(Protocol::Gzsd);
        assert!(matches!(evaluate(&[], &[], &vocab, &gzsd), Err(Error::Protocol(_))));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::new(vec![0.5, 0.5], Protocol::Closed, 0.0).is_err());
        assert!(EvalConfig::new(vec![0.0, 0.5], Protocol::Closed, 0.0).is_err());
        assert!(EvalConfig::new(vec![0.5, 1.0], Protocol::Closed, 0.0).is_ok());
        assert_eq!(coco_thresholds().len(), 10);
    }
}
