//! Label assignment and the detection objective.
//!
//! Per prediction stage, queries are matched one-to-one to ground truth with
//! a cost built from the sigmoid similarity at the ground-truth class and
//! the box distances. Matched queries get a soft target `u` equal to the IoU
//! of their (detached) box with the matched box at the ground-truth slot;
//! every other valid entry is a negative.

use alloc::format;
use alloc::vec::Vec;

use crate::boxes::{boxes_to_tensor, giou_loss, giou_loss_rows, iou, l1_rows, tensor_to_boxes, BoxCxcywh};
use crate::decoder::LayerOutput;
use crate::error::{Error, Result};
use crate::math;
use crate::matching::{hungarian_match, Assignment};
use crate::tape::{varifocal_term, Tape, Var};
use crate::tensor::Tensor;

/// Boxes (normalized cxcywh) and vocabulary class indices of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BoxCxcywh>,
    pub class_ids: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BoxCxcywh>, class_ids: Vec<usize>) -> Result<Self> {
        if boxes.len() != class_ids.len() {
            return Err(Error::Contract(format!(
                "{} boxes but {} class ids",
                boxes.len(),
                class_ids.len()
            )));
        }
        for b in &boxes {
            if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("invalid ground-truth box {b:?}")));
            }
        }
        Ok(Self { boxes, class_ids })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Weights of the composite objective and the varifocal constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub mu_giou: f64,
    pub nu_l1: f64,
    pub vfl_alpha: f64,
    pub vfl_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 1.0,
            mu_giou: 2.0,
            nu_l1: 5.0,
            vfl_alpha: 0.75,
            vfl_gamma: 2.0,
        }
    }
}

/// Matching-cost weights and the focal constants of the class cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_giou: f64,
    pub l_l1: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Focal-style class cost of probability `p` for the ground-truth class.
pub fn focal_class_cost(p: f64, w: &MatchWeights) -> f64 {
    let pos = w.focal_alpha * math::powf(1.0 - p, w.focal_gamma) * -math::ln(p + 1e-8);
    let neg = (1.0 - w.focal_alpha) * math::powf(p, w.focal_gamma) * -math::ln(1.0 - p + 1e-8);
    pos - neg
}

/// `[N, K]` matching cost between predictions and ground truth.
///
/// `probs` holds `σ(S)` per slot; `slot_to_class` maps slots to vocabulary
/// classes.
pub fn match_cost(
    boxes: &[BoxCxcywh],
    probs: &Tensor,
    slot_to_class: &[Option<usize>],
    gt: &GroundTruth,
    weights: &MatchWeights,
) -> Result<Tensor> {
    let (n, slots) = probs.dims2()?;
    if n != boxes.len() || slots != slot_to_class.len() {
        return Err(Error::Shape {
            op: "match_cost",
            detail: format!("{} boxes, probs {:?}, {} slots", boxes.len(), probs.shape(), slot_to_class.len()),
        });
    }
    let gt_slots = gt_slots(slot_to_class, gt)?;
    let k = gt.len();
    let mut data = Vec::with_capacity(n * k);
    for (i, b) in boxes.iter().enumerate() {
        for (g, gb) in gt.boxes.iter().enumerate() {
            let p = probs.at(i, gt_slots[g]);
            let l1: f64 = b.iter().zip(gb).map(|(x, y)| (x - y).abs()).sum();
            data.push(weights.class * focal_class_cost(p, weights) + weights.l1 * l1 + weights.giou * giou_loss(*b, *gb));
        }
    }
    Tensor::new(&[n, k], data)
}

/// Slot of every ground-truth class; errors when one was not sampled.
pub fn gt_slots(slot_to_class: &[Option<usize>], gt: &GroundTruth) -> Result<Vec<usize>> {
    gt.class_ids
        .iter()
        .map(|&c| {
            slot_to_class
                .iter()
                .position(|&s| s == Some(c))
                .ok_or_else(|| Error::Contract(format!("ground-truth class {c} has no class slot")))
        })
        .collect()
}

/// Soft targets: `u = iou` at `(query, slot of its ground truth)`, 0 elsewhere.
pub fn alignment_targets(
    n_queries: usize,
    n_slots: usize,
    assignment: &Assignment,
    gt_slot: &[usize],
    ious: &[f64],
) -> Result<Tensor> {
    if ious.len() != assignment.len() {
        return Err(Error::Contract(format!("{} IoUs for {} pairs", ious.len(), assignment.len())));
    }
    let mut u = Tensor::zeros(&[n_queries, n_slots]);
    for (&(q, g), &v) in assignment.pairs.iter().zip(ious) {
        u.data_mut()[q * n_slots + gt_slot[g]] = v;
    }
    Ok(u)
}

/// Varifocal alignment loss on raw scores `[N, n_slots]`, summed over
/// queries and valid slots and divided by `normalizer`.
#[allow(clippy::too_many_arguments)]
pub fn alignment_loss(
    tape: &mut Tape<'_>,
    scores: Var,
    valid: &[bool],
    assignment: &Assignment,
    gt_slot: &[usize],
    ious: &[f64],
    weights: &LossWeights,
    normalizer: f64,
) -> Result<Var> {
    let (n, slots) = tape.value(scores).dims2()?;
    let u = alignment_targets(n, slots, assignment, gt_slot, ious)?;
    tape.varifocal_loss(scores, &u, valid, weights.vfl_alpha, weights.vfl_gamma, normalizer)
}

/// One varifocal entry as a plain scalar.
pub fn alignment_term(score: f64, u: f64, weights: &LossWeights) -> f64 {
    varifocal_term(score, u, weights.vfl_alpha, weights.vfl_gamma).0
}

/// Loss parts of one prediction stage, as tape scalars.
pub struct StageLoss {
    pub con: Var,
    pub giou: Var,
    pub l1: Var,
    pub assignment: Assignment,
}

#[allow(clippy::too_many_arguments)]
pub fn stage_loss(
    tape: &mut Tape<'_>,
    out: &LayerOutput,
    slot_to_class: &[Option<usize>],
    valid: &[bool],
    gt: &GroundTruth,
    weights: &LossWeights,
    match_weights: &MatchWeights,
    normalizer: f64,
) -> Result<StageLoss> {
    let boxes = tensor_to_boxes(tape.value(out.boxes));
    let raw = tape.value(out.scores);
    let probs = Tensor::new(raw.shape(), raw.data().iter().map(|&s| math::sigmoid(s)).collect())?;
    let cost = match_cost(&boxes, &probs, slot_to_class, gt, match_weights)?;
    let assignment = hungarian_match(&cost)?;
    let slots = gt_slots(slot_to_class, gt)?;
    let ious: Vec<f64> = assignment
        .pairs
        .iter()
        .map(|&(q, g)| iou(boxes[q], gt.boxes[g]))
        .collect();
    let con = alignment_loss(tape, out.scores, valid, &assignment, &slots, &ious, weights, normalizer)?;

    let (giou, l1) = if assignment.is_empty() {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let target: Vec<BoxCxcywh> = assignment.pairs.iter().map(|p| gt.boxes[p.1]).collect();
        let target = boxes_to_tensor(&target);
        let pred = tape.gather_rows(out.boxes, &rows)?;
        let g = giou_loss_rows(tape, pred, &target)?;
        let g = tape.sum(g)?;
        let g = tape.scale(g, 1.0 / normalizer)?;
        let l = l1_rows(tape, pred, &target)?;
        let l = tape.sum(l)?;
        let l = tape.scale(l, 1.0 / normalizer)?;
        (g, l)
    };
    Ok(StageLoss {
        con,
        giou,
        l1,
        assignment,
    })
}

/// Sums the three parts over all stages (each re-matched) and weights them.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape<'_>,
    stages: &[LayerOutput],
    slot_to_class: &[Option<usize>],
    valid: &[bool],
    gt: &GroundTruth,
    weights: &LossWeights,
    match_weights: &MatchWeights,
    normalizer: f64,
) -> Result<(Var, LossBreakdown)> {
    if stages.is_empty() {
        return Err(Error::Contract("no prediction stages to score".into()));
    }
    let mut sums: Option<(Var, Var, Var)> = None;
    for out in stages {
        let s = stage_loss(tape, out, slot_to_class, valid, gt, weights, match_weights, normalizer)?;
        sums = Some(match sums {
            None => (s.con, s.giou, s.l1),
            Some((c, g, l)) => (tape.add(c, s.con)?, tape.add(g, s.giou)?, tape.add(l, s.l1)?),
        });
    }
    let (con, giou, l1) = sums.expect("at least one stage");
    let a = tape.scale(con, weights.lambda_con)?;
    let b = tape.scale(giou, weights.mu_giou)?;
    let c = tape.scale(l1, weights.nu_l1)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let read = |v: Var| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        l_con: read(con),
        l_giou: read(giou),
        l_l1: read(l1),
        total: read(total),
        weights: *weights,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn documented_alignment_values() {
        let w = LossWeights::default();
        // θ = 0.5 at score 0.
        assert!((alignment_term(0.0, 1.0, &w) - 0.693_147).abs() < 1e-6);
        assert!((alignment_term(0.0, 0.0, &w) - 0.129_965).abs() < 1e-6);
        assert!(alignment_term(-40.0, 0.0, &w) < 1e-30);
    }

    #[test]
    fn cost_is_minimal_at_true_pair() {
        let gt = GroundTruth::new(vec![[0.5, 0.5, 0.2, 0.2]], vec![1]).unwrap();
        let boxes = [[0.5, 0.5, 0.2, 0.2], [0.2, 0.3, 0.1, 0.4], [0.5, 0.5, 0.2, 0.2]];
        let probs = Tensor::from_rows(&[&[0.1, 1.0 - 1e-9], &[0.5, 0.3], &[0.1, 0.2]]).unwrap();
        let cost = match_cost(&boxes, &probs, &[Some(0), Some(1)], &gt, &MatchWeights::default()).unwrap();
        assert!(cost.at(0, 0) < cost.at(1, 0) && cost.at(0, 0) < cost.at(2, 0));
        let twin = Tensor::from_rows(&[&[0.1, 0.4], &[0.1, 0.4]]).unwrap();
        let c2 = match_cost(&boxes[1..], &twin, &[Some(0), Some(1)], &gt, &MatchWeights::default());
        assert!(c2.is_ok());
        let same = match_cost(&[boxes[1], boxes[1]], &twin, &[Some(0), Some(1)], &gt, &MatchWeights::default())
            .unwrap();
        assert_eq!(same.row(0), same.row(1));
    }

    #[test]
    fn missing_class_slot_is_an_error() {
        let gt = GroundTruth::new(vec![[0.5, 0.5, 0.2, 0.2]], vec![7]).unwrap();
        let probs = Tensor::from_rows(&[&[0.5]]).unwrap();
        let r = match_cost(&[[0.5, 0.5, 0.1, 0.1]], &probs, &[Some(0)], &gt, &MatchWeights::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn ground_truth_validation() {
        assert!(GroundTruth::new(vec![[0.5, 0.5, 0.0, 0.2]], vec![0]).is_err());
        assert!(GroundTruth::new(vec![[0.5, 0.5, 0.1, 0.2]], vec![]).is_err());
    }
}
