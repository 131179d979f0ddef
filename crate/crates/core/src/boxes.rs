//! Axis-aligned box geometry: IoU and generalized IoU, as plain scalars and
//! as differentiable tape expressions.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use alloc::format;

/// `(cx, cy, w, h)`, usually normalized to the image size.
pub type BoxCxcywh = [f64; 4];
/// `(x1, y1, x2, y2)`.
pub type BoxXyxy = [f64; 4];

pub fn cxcywh_to_xyxy(b: BoxCxcywh) -> BoxXyxy {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

pub fn xyxy_to_cxcywh(b: BoxXyxy) -> BoxCxcywh {
    [0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]), b[2] - b[0], b[3] - b[1]]
}

fn area(b: BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

/// IoU of two corner-form boxes; 0 when the union has no area.
pub fn iou_xyxy(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

/// `1 - GIoU` of two corner-form boxes, in `[0, 2]`.
pub fn giou_loss_xyxy(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let hull = area([a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]);
    if hull <= 0.0 {
        return 1.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    1.0 - (iou - (hull - union) / hull)
}

pub fn giou_loss(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    giou_loss_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

pub fn boxes_to_tensor(boxes: &[BoxCxcywh]) -> Tensor {
    let data = boxes.iter().flat_map(|b| b.iter().copied()).collect();
    Tensor::new(&[boxes.len(), 4], data).expect("box tensor shape")
}

pub fn tensor_to_boxes(t: &Tensor) -> Vec<BoxCxcywh> {
    t.data()
        .chunks(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect()
}

fn check_pairs(tape: &Tape<'_>, pred: Var, target: &Tensor, op: &'static str) -> Result<usize> {
    let (m, n) = tape.value(pred).dims2()?;
    if n != 4 || target.shape() != [m, 4] {
        return shape_err(op, format!("pred {:?} vs target {:?}", tape.value(pred).shape(), target.shape()));
    }
    Ok(m)
}

/// Per-pair `‖pred - target‖₁` as `[M, 1]`.
pub fn l1_rows(tape: &mut Tape<'_>, pred: Var, target: &Tensor) -> Result<Var> {
    let m = check_pairs(tape, pred, target, "l1_rows")?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let d = tape.abs(d)?;
    let ones = tape.constant(Tensor::ones(&[4, 1]));
    let out = tape.matmul(d, ones)?;
    debug_assert_eq!(tape.value(out).rows(), m);
    Ok(out)
}

/// Per-pair `1 - GIoU(pred, target)` as `[M, 1]`, differentiable in `pred`
/// (cxcywh rows).
pub fn giou_loss_rows(tape: &mut Tape<'_>, pred: Var, target: &Tensor) -> Result<Var> {
    let m = check_pairs(tape, pred, target, "giou_loss_rows")?;
    let col = |t: &Tensor, f: &dyn Fn(BoxXyxy) -> f64| -> Tensor {
        let data = tensor_to_boxes(t).into_iter().map(|b| f(cxcywh_to_xyxy(b))).collect();
        Tensor::new(&[m, 1], data).expect("column")
    };
    let tx1 = tape.constant(col(target, &|b| b[0]));
    let ty1 = tape.constant(col(target, &|b| b[1]));
    let tx2 = tape.constant(col(target, &|b| b[2]));
    let ty2 = tape.constant(col(target, &|b| b[3]));
    let t_area = tape.constant(col(target, &area));

    let cx = tape.slice_cols(pred, 0, 1)?;
    let cy = tape.slice_cols(pred, 1, 1)?;
    let w = tape.slice_cols(pred, 2, 1)?;
    let h = tape.slice_cols(pred, 3, 1)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;

    let ix1 = tape.maximum(x1, tx1)?;
    let ix2 = tape.minimum(x2, tx2)?;
    let iy1 = tape.maximum(y1, ty1)?;
    let iy2 = tape.minimum(y2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.clamp_min(iw, 0.0)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.clamp_min(ih, 0.0)?;
    let inter = tape.mul(iw, ih)?;

    let p_area = tape.mul(w, h)?;
    let union = tape.add(p_area, t_area)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(x1, tx1)?;
    let hx2 = tape.maximum(x2, tx2)?;
    let hy1 = tape.minimum(y1, ty1)?;
    let hy2 = tape.maximum(y2, ty2)?;
    let hull_w = tape.sub(hx2, hx1)?;
    let hull_h = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hull_w, hull_h)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    let giou = tape.sub(iou, penalty)?;
    let neg = tape.scale(giou, -1.0)?;
    tape.add_const(neg, 1.0)
}
