//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward values on fresh tapes, so it
//! does not share any code path with [`Tape::backward`].

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode_image, BackboneParams};
use crate::boxes::{giou_loss_rows, l1_rows};
use crate::decoder::{contrastive_scores, tg_qe, BoxHead, ContrastiveHead};
use crate::fusion::{feed_forward, tg_fe, vg_tr, FusionParams, MixingParams, TextState};
use crate::loss::{alignment_loss, LossWeights};
use crate::matching::Assignment;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`, maximized.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a tape.
///
/// `f` receives one tracked leaf per input tensor and must return a
/// single-element variable.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check_with_params(&ParamStore::new(), inputs, eps, f)
}

/// Like [`check`], additionally perturbing every tensor of `store`.
pub fn check_with_params<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check_impl(store, inputs, eps, true, f)
}

fn check_impl<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, perturb_params: bool, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let (param_grads, input_grads) = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let input_grads: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (grads.into_param_grads(), input_grads)
    };

    let eval = |params: &ParamStore, perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new(params);
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(v.data()[0])
    };

    let mut report = GradCheckReport::default();
    let mut record = |a: f64, numeric: f64| {
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
        report.checked += 1;
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for which in 0..inputs.len() {
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            work[which].data_mut()[k] = orig + eps;
            let up = eval(store, &work)?;
            work[which].data_mut()[k] = orig - eps;
            let down = eval(store, &work)?;
            work[which].data_mut()[k] = orig;
            record(input_grads[which].data()[k], (up - down) / (2.0 * eps));
        }
    }
    let mut params = store.clone();
    let n_params = if perturb_params { store.len() } else { 0 };
    for p in 0..n_params {
        for k in 0..store.tensors()[p].len() {
            let orig = store.tensors()[p].data()[k];
            params.tensors_mut()[p].data_mut()[k] = orig + eps;
            let up = eval(&params, inputs)?;
            params.tensors_mut()[p].data_mut()[k] = orig - eps;
            let down = eval(&params, inputs)?;
            params.tensors_mut()[p].data_mut()[k] = orig;
            record(param_grads[p].data()[k], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Contracts an arbitrary-shaped output with fixed weights, giving a scalar
/// whose gradient exercises every output entry.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

/// One named case of the finite-difference suite.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub report: GradCheckReport,
}

/// Step used by the suite.
pub const SUITE_EPS: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Entries with magnitude in `[0.2, 1]` and random sign; keeps kinks of
/// `abs`/`relu` out of reach of the finite-difference step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

/// A mask with at least one `true`.
fn some_valid(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let k = rng.gen_range(0..n);
    m[k] = true;
    m
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(4 * n);
    for _ in 0..n {
        data.extend_from_slice(&[
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.05..0.5),
            rng.gen_range(0.05..0.5),
        ]);
    }
    Tensor::new(&[n, 4], data).expect("shape")
}

/// Prediction/target box pairs kept 0.01 away from every max/min/clamp
/// kink of the IoU expressions.
fn box_pairs(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Tensor) {
    let mut pred = Vec::with_capacity(4 * n);
    let mut target = Vec::with_capacity(4 * n);
    while pred.len() < 4 * n {
        let p = random_boxes(rng, 1);
        let t = random_boxes(rng, 1);
        let (a, b) = (p.data(), t.data());
        let pa = crate::boxes::cxcywh_to_xyxy([a[0], a[1], a[2], a[3]]);
        let tb = crate::boxes::cxcywh_to_xyxy([b[0], b[1], b[2], b[3]]);
        let iw = pa[2].min(tb[2]) - pa[0].max(tb[0]);
        let ih = pa[3].min(tb[3]) - pa[1].max(tb[1]);
        let apart = (0..4).all(|k| (pa[k] - tb[k]).abs() > 0.01 && (a[k] - b[k]).abs() > 0.01);
        if apart && iw.abs() > 0.01 && ih.abs() > 0.01 {
            pred.extend_from_slice(a);
            target.extend_from_slice(b);
        }
    }
    (
        Tensor::new(&[n, 4], pred).expect("shape"),
        Tensor::new(&[n, 4], target).expect("shape"),
    )
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

fn unary(rng: &mut ChaCha8Rng, x: Tensor, op: fn(&mut Tape<'_>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let probe = {
        let mut t = Tape::detached();
        let v = t.constant(x.clone());
        let y = op(&mut t, v)?;
        t.value(y).shape().to_vec()
    };
    let w = uniform(rng, &probe, -1.0, 1.0);
    check(&[x], SUITE_EPS, move |t, v| {
        let y = op(t, v[0])?;
        weighted_sum(t, y, &w)
    })
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor,
    b: Tensor,
    op: fn(&mut Tape<'_>, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let probe = {
        let mut t = Tape::detached();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let y = op(&mut t, va, vb)?;
        t.value(y).shape().to_vec()
    };
    let w = uniform(rng, &probe, -1.0, 1.0);
    check(&[a, b], SUITE_EPS, move |t, v| {
        let y = op(t, v[0], v[1])?;
        weighted_sum(t, y, &w)
    })
}

fn same_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (m, n) = dims(rng);
    (uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[m, n], -1.0, 1.0))
}

/// Pair whose entries differ by at least 0.2.
fn separated_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (m, n) = dims(rng);
    let a = uniform(rng, &[m, n], -1.0, 1.0);
    let d = off_zero(rng, &[m, n]);
    let b = Tensor::new(&[m, n], a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).expect("shape");
    (a, b)
}

fn small_text(rng: &mut ChaCha8Rng, store: &mut ParamStore, visual_guided: bool) -> Result<(FusionParams, usize, usize)> {
    let c = rng.gen_range(2..=4);
    let d = rng.gen_range(2..=4);
    let dh = rng.gen_range(1..=3);
    let p = if visual_guided {
        FusionParams::init_visual_guided(store, "f", c, d, dh, rng)?
    } else {
        FusionParams::init_text_guided(store, "f", c, d, dh, rng)?
    };
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x *= 2.0;
        }
    }
    Ok((p, c, d))
}

fn tg_case(rng: &mut ChaCha8Rng, as_query: bool) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let (p, c, d) = small_text(rng, &mut store, false)?;
    let m = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=4);
    let valid = some_valid(rng, n);
    let gate = rng.gen_bool(0.8);
    let x = uniform(rng, &[m, c], -1.0, 1.0);
    let e = uniform(rng, &[n, d], -1.0, 1.0);
    let w = uniform(rng, &[m, c], -1.0, 1.0);
    let wg = uniform(rng, &[m, 1], -1.0, 1.0);
    check_with_params(&store, &[x, e], SUITE_EPS, move |t, v| {
        let text = TextState {
            embeddings: v[1],
            valid: valid.clone(),
        };
        let (y, g) = if as_query {
            tg_qe(t, v[0], &text, &p, gate)?
        } else {
            tg_fe(t, v[0], &text, &p, gate)?
        };
        let a = weighted_sum(t, y, &w)?;
        let b = weighted_sum(t, g, &wg)?;
        t.add(a, b)
    })
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    alloc::vec![
        ("add", |r| { let (a, b) = same_pair(r); binary(r, a, b, |t, a, b| t.add(a, b)) }),
        ("sub", |r| { let (a, b) = same_pair(r); binary(r, a, b, |t, a, b| t.sub(a, b)) }),
        ("mul", |r| { let (a, b) = same_pair(r); binary(r, a, b, |t, a, b| t.mul(a, b)) }),
        ("div", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = off_zero(r, &[m, n]);
            binary(r, a, b, |t, a, b| t.div(a, b))
        }),
        ("maximum", |r| { let (a, b) = separated_pair(r); binary(r, a, b, |t, a, b| t.maximum(a, b)) }),
        ("minimum", |r| { let (a, b) = separated_pair(r); binary(r, a, b, |t, a, b| t.minimum(a, b)) }),
        ("scale", |r| { let (m, n) = dims(r); let x = uniform(r, &[m, n], -1.0, 1.0); unary(r, x, |t, x| t.scale(x, -1.7)) }),
        ("add_const", |r| { let (m, n) = dims(r); let x = uniform(r, &[m, n], -1.0, 1.0); unary(r, x, |t, x| t.add_const(x, 0.3)) }),
        ("clamp_min", |r| { let (m, n) = dims(r); let x = off_zero(r, &[m, n]); unary(r, x, |t, x| t.clamp_min(x, 0.0)) }),
        ("add_row", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[n], -1.0, 1.0);
            binary(r, a, b, |t, a, b| t.add_row(a, b))
        }),
        ("mul_row", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[n], -1.0, 1.0);
            binary(r, a, b, |t, a, b| t.mul_row(a, b))
        }),
        ("mul_col", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[m, 1], -1.0, 1.0);
            binary(r, a, b, |t, a, b| t.mul_col(a, b))
        }),
        ("add_scalar", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[1], -1.0, 1.0);
            binary(r, a, b, |t, a, b| t.add_scalar(a, b))
        }),
        ("mul_scalar", |r| {
            let (m, n) = dims(r);
            let a = uniform(r, &[m, n], -1.0, 1.0);
            let b = uniform(r, &[1], -1.0, 1.0);
            binary(r, a, b, |t, a, b| t.mul_scalar(a, b))
        }),
        ("matmul", |r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..=4);
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &[k, n], -1.0, 1.0);
            binary(r, a, b, |t, a, b| t.matmul(a, b))
        }),
        ("transpose", |r| { let (m, n) = dims(r); let x = uniform(r, &[m, n], -1.0, 1.0); unary(r, x, |t, x| t.transpose(x)) }),
        ("softmax_rows", |r| {
            let (m, n) = dims(r);
            let x = uniform(r, &[m, n], -2.0, 2.0);
            let mask = some_valid(r, n);
            let w = uniform(r, &[m, n], -1.0, 1.0);
            check(&[x], SUITE_EPS, move |t, v| {
                let y = t.softmax_rows(v[0], Some(&mask))?;
                weighted_sum(t, y, &w)
            })
        }),
        ("row_max", |r| {
            let (m, n) = dims(r);
            // Distinct entries a step of 0.3 apart, shuffled per row.
            let mut data = Vec::with_capacity(m * n);
            for _ in 0..m {
                let mut row: Vec<f64> = (0..n).map(|j| 0.3 * j as f64 + r.gen_range(0.0..0.1)).collect();
                row.shuffle(r);
                data.extend(row);
            }
            let x = Tensor::new(&[m, n], data)?;
            let mask = some_valid(r, n);
            let w = uniform(r, &[m, 1], -1.0, 1.0);
            check(&[x], SUITE_EPS, move |t, v| {
                let y = t.row_max(v[0], Some(&mask))?;
                weighted_sum(t, y, &w)
            })
        }),
        ("sigmoid", |r| { let (m, n) = dims(r); let x = uniform(r, &[m, n], -3.0, 3.0); unary(r, x, |t, x| t.sigmoid(x)) }),
        ("silu", |r| { let (m, n) = dims(r); let x = uniform(r, &[m, n], -3.0, 3.0); unary(r, x, |t, x| t.silu(x)) }),
        ("relu", |r| { let (m, n) = dims(r); let x = off_zero(r, &[m, n]); unary(r, x, |t, x| t.relu(x)) }),
        ("abs", |r| { let (m, n) = dims(r); let x = off_zero(r, &[m, n]); unary(r, x, |t, x| t.abs(x)) }),
        ("layer_norm_rows", |r| {
            let m = r.gen_range(1..=4);
            let n = r.gen_range(2..=5);
            let x = uniform(r, &[m, n], -1.0, 1.0);
            unary(r, x, |t, x| t.layer_norm_rows(x, 1e-5))
        }),
        ("l2_normalize_rows", |r| {
            let (m, n) = dims(r);
            let x = off_zero(r, &[m, n]);
            unary(r, x, |t, x| t.l2_normalize_rows(x, 1e-12))
        }),
        ("mask_cols", |r| {
            let (m, n) = dims(r);
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let mask = some_valid(r, n);
            let w = uniform(r, &[m, n], -1.0, 1.0);
            // Masked entries hold a huge constant; the weights skip them.
            let w = Tensor::new(
                &[m, n],
                w.data().iter().enumerate().map(|(k, &x)| if mask[k % n] { x } else { 0.0 }).collect(),
            )?;
            check(&[x], SUITE_EPS, move |t, v| {
                let y = t.mask_cols(v[0], &mask)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("concat_rows", |r| {
            let n = r.gen_range(1..=4);
            let a = { let rows = r.gen_range(1..=3); uniform(r, &[rows, n], -1.0, 1.0) };
            let b = { let rows = r.gen_range(1..=3); uniform(r, &[rows, n], -1.0, 1.0) };
            binary(r, a, b, |t, a, b| t.concat_rows(&[a, b]))
        }),
        ("concat_cols", |r| {
            let m = r.gen_range(1..=4);
            let a = { let cols = r.gen_range(1..=3); uniform(r, &[m, cols], -1.0, 1.0) };
            let b = { let cols = r.gen_range(1..=3); uniform(r, &[m, cols], -1.0, 1.0) };
            binary(r, a, b, |t, a, b| t.concat_cols(&[a, b]))
        }),
        ("gather_rows", |r| {
            let (m, n) = dims(r);
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let idx: Vec<usize> = (0..r.gen_range(1..=5)).map(|_| r.gen_range(0..m)).collect();
            let w = uniform(r, &[idx.len(), n], -1.0, 1.0);
            check(&[x], SUITE_EPS, move |t, v| {
                let y = t.gather_rows(v[0], &idx)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("slice_cols", |r| {
            let m = r.gen_range(1..=4);
            let n = r.gen_range(2..=5);
            let x = uniform(r, &[m, n], -1.0, 1.0);
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n - start);
            let w = uniform(r, &[m, len], -1.0, 1.0);
            check(&[x], SUITE_EPS, move |t, v| {
                let y = t.slice_cols(v[0], start, len)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("sum", |r| { let (m, n) = dims(r); let x = uniform(r, &[m, n], -1.0, 1.0); unary(r, x, |t, x| t.sum(x)) }),
        ("patchify", |r| {
            let p = r.gen_range(1..=3);
            let (gh, gw) = (r.gen_range(1..=2), r.gen_range(1..=2));
            let x = uniform(r, &[3, gh * p, gw * p], 0.0, 1.0);
            let w = uniform(r, &[gh * gw, 3 * p * p], -1.0, 1.0);
            check(&[x], SUITE_EPS, move |t, v| {
                let y = t.patchify(v[0], p)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("varifocal_loss", |r| {
            let (m, n) = dims(r);
            let s = uniform(r, &[m, n], -4.0, 4.0);
            let u = Tensor::new(
                &[m, n],
                (0..m * n).map(|_| if r.gen_bool(0.3) { r.gen_range(0.05..1.0) } else { 0.0 }).collect(),
            )?;
            let valid = some_valid(r, n);
            let norm = r.gen_range(1.0..4.0);
            check(&[s], SUITE_EPS, move |t, v| t.varifocal_loss(v[0], &u, &valid, 0.75, 2.0, norm))
        }),
        ("tg_fe", |r| tg_case(r, false)),
        ("tg_qe", |r| tg_case(r, true)),
        ("vg_tr", |r| {
            let mut store = ParamStore::new();
            let (p, c, d) = small_text(r, &mut store, true)?;
            let m = r.gen_range(1..=4);
            let n = r.gen_range(1..=4);
            let valid = some_valid(r, n);
            let x = uniform(r, &[m, c], -1.0, 1.0);
            let e = uniform(r, &[n, d], -1.0, 1.0);
            let w = uniform(r, &[n, d], -1.0, 1.0);
            check_with_params(&store, &[x, e], SUITE_EPS, move |t, v| {
                let text = TextState {
                    embeddings: v[1],
                    valid: valid.clone(),
                };
                let y = vg_tr(t, &text, v[0], &p)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("contrastive_head", |r| {
            let mut store = ParamStore::new();
            let c = r.gen_range(2..=4);
            let d = r.gen_range(2..=4);
            let head = ContrastiveHead::init(&mut store, c, d, r.gen_range(1.0..6.0), r.gen_range(-3.0..0.0), r)?;
            let m = r.gen_range(1..=4);
            let n = r.gen_range(1..=4);
            let valid = some_valid(r, n);
            let x = off_zero(r, &[m, c]);
            let e = off_zero(r, &[n, d]);
            let w = Tensor::new(
                &[m, n],
                (0..m * n).map(|k| if valid[k % n] { r.gen_range(-1.0..1.0) } else { 0.0 }).collect(),
            )?;
            check_with_params(&store, &[x, e], SUITE_EPS, move |t, v| {
                let text = TextState {
                    embeddings: v[1],
                    valid: valid.clone(),
                };
                let s = contrastive_scores(t, v[0], &text, &head)?;
                weighted_sum(t, s, &w)
            })
        }),
        ("alignment_loss", |r| {
            let n = r.gen_range(1..=5);
            let slots = r.gen_range(1..=4);
            let s = uniform(r, &[n, slots], -4.0, 4.0);
            let valid = some_valid(r, slots);
            let valid_slots: Vec<usize> = (0..slots).filter(|&j| valid[j]).collect();
            let k = r.gen_range(0..=n.min(3));
            let mut queries: Vec<usize> = (0..n).collect();
            queries.shuffle(r);
            let assignment = Assignment {
                pairs: {
                    let mut p: Vec<(usize, usize)> = (0..k).map(|g| (queries[g], g)).collect();
                    p.sort_unstable();
                    p
                },
            };
            let gt_slot: Vec<usize> = (0..k).map(|_| valid_slots[r.gen_range(0..valid_slots.len())]).collect();
            let ious: Vec<f64> = assignment.pairs.iter().map(|_| r.gen_range(0.05..1.0)).collect();
            let weights = LossWeights::default();
            check(&[s], SUITE_EPS, move |t, v| {
                alignment_loss(t, v[0], &valid, &assignment, &gt_slot, &ious, &weights, (k.max(1)) as f64)
            })
        }),
        ("giou_loss", |r| {
            let n = r.gen_range(1..=4);
            let (pred, target) = box_pairs(r, n);
            let w = uniform(r, &[n, 1], 0.5, 1.5);
            check(&[pred], SUITE_EPS, move |t, v| {
                let g = giou_loss_rows(t, v[0], &target)?;
                weighted_sum(t, g, &w)
            })
        }),
        ("l1_loss", |r| {
            let n = r.gen_range(1..=4);
            let (pred, target) = box_pairs(r, n);
            let w = uniform(r, &[n, 1], 0.5, 1.5);
            check(&[pred], SUITE_EPS, move |t, v| {
                let g = l1_rows(t, v[0], &target)?;
                weighted_sum(t, g, &w)
            })
        }),
        ("feed_forward", |r| {
            let mut store = ParamStore::new();
            let c = r.gen_range(3..=5);
            let p = MixingParams::init(&mut store, "m", c, r.gen_range(1..=4), r)?;
            let x = { let rows = r.gen_range(1..=3); uniform(r, &[rows, c], -1.0, 1.0) };
            let w = uniform(r, x.shape(), -1.0, 1.0);
            check_with_params(&store, &[x], SUITE_EPS, move |t, v| {
                let y = feed_forward(t, v[0], &p)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("box_refine", |r| {
            let mut store = ParamStore::new();
            let c = r.gen_range(2..=4);
            let head = BoxHead::init(&mut store, "b", c, r)?;
            for t in store.tensors_mut() {
                for x in t.data_mut() {
                    *x += r.gen_range(-0.3..0.3);
                }
            }
            let n = r.gen_range(1..=3);
            let x = uniform(r, &[n, c], -1.0, 1.0);
            let reference = crate::boxes::tensor_to_boxes(&random_boxes(r, n));
            let w = uniform(r, &[n, 4], -1.0, 1.0);
            check_with_params(&store, &[x], SUITE_EPS, move |t, v| {
                let y = head.refine(t, v[0], &reference)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("encode_image", |r| {
            // Pixel gradients only; the parameter side is covered by the
            // patchify, matmul, silu and layer-norm cases.
            let mut store = ParamStore::new();
            let params = BackboneParams::init(&mut store, r.gen_range(1..=2), r)?;
            let x = uniform(r, &[3, 32, 32], 0.0, 1.0);
            let mut probe = Tape::new(&store);
            let xv = probe.constant(x.clone());
            let feats = encode_image(&mut probe, &params, xv)?;
            let shapes: Vec<Vec<usize>> = feats.levels.iter().map(|l| probe.value(l.tokens).shape().to_vec()).collect();
            let ws: Vec<Tensor> = shapes.iter().map(|s| uniform(r, s, -1.0, 1.0)).collect();
            let params_ref = params.clone();
            let f = move |t: &mut Tape<'_>, v: &[Var]| -> Result<Var> {
                let feats = encode_image(t, &params_ref, v[0])?;
                let mut acc: Option<Var> = None;
                for (l, w) in feats.levels.iter().zip(&ws) {
                    let s = weighted_sum(t, l.tokens, w)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => t.add(a, s)?,
                    });
                }
                Ok(acc.expect("three levels"))
            };
            check_impl(&store, &[x], SUITE_EPS, false, f)
        }),
    ]
}

/// Names of every suite case, in run order.
pub fn suite_case_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Runs every case on `instances` seeded random draws. Case `c`, instance
/// `i` uses seed `seed ⊕ (c << 32) ⊕ i`.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for (c, (name, f)) in cases().into_iter().enumerate() {
        let n = if name == "encode_image" { instances.min(10) } else { instances };
        let mut report = GradCheckReport::default();
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64) << 32) ^ i as u64);
            report = report.merge(f(&mut rng)?);
        }
        out.push(CaseReport {
            name,
            instances: n,
            report,
        });
    }
    Ok(out)
}
