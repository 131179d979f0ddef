//! Query selection, text-guided query enhancement, the decoder stack and the
//! contrastive head.
//!
//! The contrastive head scores a visual vector `v` against a class embedding
//! `t` as `α · cos(proj(v), t) + β`; `α` and `β` are single learned scalars.
//! Encoder tokens are ranked by their best score over the valid class slots
//! and the top `K` become the object queries. Every decoder layer first
//! enhances its queries with the class embeddings (the same gated injection
//! as the encoder, with one parameter set shared by all layers), lets the
//! queries attend to each other, then
//! cross-attends to the encoder tokens, runs a feed-forward block, refines
//! its boxes in inverse-sigmoid space and scores them.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::MultiScaleFeatures;
use crate::boxes::{boxes_to_tensor, tensor_to_boxes, BoxCxcywh};
use crate::error::{Error, Result};
use crate::fusion::{affine_norm, feed_forward, tg_fe, EnhancedState, FusionParams, MixingParams, TextState};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-12;

/// Linear image projection plus the shared scale and offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastiveHead {
    pub proj: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl ContrastiveHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        channels: usize,
        text_dim: usize,
        alpha: f64,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: store.add_uniform("head.proj", &[channels, text_dim], channels, rng)?,
            alpha: store.add_full("head.alpha", &[1], alpha)?,
            beta: store.add_full("head.beta", &[1], beta)?,
        })
    }
}

/// `[N, n_slots]` similarity scores; padding slots read [`crate::tape::MASKED_LOGIT`].
pub fn contrastive_scores(
    tape: &mut Tape<'_>,
    visual: Var,
    text: &TextState,
    head: &ContrastiveHead,
) -> Result<Var> {
    let proj = tape.param(head.proj);
    let v = tape.matmul(visual, proj)?;
    let v = tape.l2_normalize_rows(v, NORM_EPS)?;
    let t = tape.l2_normalize_rows(text.embeddings, NORM_EPS)?;
    let tt = tape.transpose(t)?;
    let cos = tape.matmul(v, tt)?;
    let alpha = tape.param(head.alpha);
    let s = tape.mul_scalar(cos, alpha)?;
    let beta = tape.param(head.beta);
    let s = tape.add_scalar(s, beta)?;
    tape.mask_cols(s, &text.valid)
}

/// Two-layer box regressor `C -> C -> 4`. The output layer starts at zero so
/// fresh predictions equal their reference boxes.
#[derive(Clone, Copy, Debug)]
pub struct BoxHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl BoxHead {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: store.add_uniform(&format!("{prefix}.w1"), &[channels, channels], channels, rng)?,
            b1: store.add_full(&format!("{prefix}.b1"), &[channels], 0.0)?,
            w2: store.add_full(&format!("{prefix}.w2"), &[channels, 4], 0.0)?,
            b2: store.add_full(&format!("{prefix}.b2"), &[4], 0.0)?,
        })
    }

    /// Box logits; add the inverse-sigmoid reference and squash to get boxes.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w1 = tape.param(self.w1);
        let h = tape.matmul(x, w1)?;
        let b1 = tape.param(self.b1);
        let h = tape.add_row(h, b1)?;
        let h = tape.silu(h)?;
        let w2 = tape.param(self.w2);
        let h = tape.matmul(h, w2)?;
        let b2 = tape.param(self.b2);
        tape.add_row(h, b2)
    }

    /// `σ(head(x) + σ⁻¹(reference))`, always inside `(0, 1)`.
    pub fn refine(&self, tape: &mut Tape<'_>, x: Var, reference: &[BoxCxcywh]) -> Result<Var> {
        let delta = self.forward(tape, x)?;
        let logits: Vec<BoxCxcywh> = reference
            .iter()
            .map(|b| b.map(math::inverse_sigmoid))
            .collect();
        let r = tape.constant(boxes_to_tensor(&logits));
        let z = tape.add(delta, r)?;
        tape.sigmoid(z)
    }
}

/// Anchor box of every token, finest level first: the cell center with a
/// side of two strides, normalized by the image size.
pub fn token_anchors(feats: &MultiScaleFeatures, image_h: usize, image_w: usize) -> Vec<BoxCxcywh> {
    let mut out = Vec::with_capacity(feats.token_count());
    for level in &feats.levels {
        let s = level.stride as f64;
        for gy in 0..level.height {
            for gx in 0..level.width {
                out.push([
                    (gx as f64 + 0.5) * s / image_w as f64,
                    (gy as f64 + 0.5) * s / image_h as f64,
                    (2.0 * s / image_w as f64).min(0.95),
                    (2.0 * s / image_h as f64).min(0.95),
                ]);
            }
        }
    }
    out
}

/// Sine/cosine features of box coordinates, `[N, 8 · freqs]`.
pub fn box_position_features(boxes: &[BoxCxcywh], freqs: usize) -> Tensor {
    let width = 8 * freqs;
    let mut data = Vec::with_capacity(boxes.len() * width);
    for b in boxes {
        for &c in b {
            for f in 0..freqs {
                let w = core::f64::consts::PI * (1u64 << f) as f64;
                data.push(math::sin(w * c));
                data.push(math::cos(w * c));
            }
        }
    }
    Tensor::new(&[boxes.len(), width], data).expect("position feature shape")
}

/// Boxes and scores emitted by one prediction stage.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[N, 4]` normalized cxcywh.
    pub boxes: Var,
    /// `[N, n_slots]` raw similarity scores.
    pub scores: Var,
    /// `[N, 1]` query-enhancement gates of this layer, if it ran.
    pub gate: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `[K, C]` content vectors of the selected tokens.
    pub content: Var,
    /// Initial reference boxes (gradient cut).
    pub reference: Vec<BoxCxcywh>,
    /// Flat indices of the selected tokens, best first.
    pub token_index: Vec<usize>,
    /// Boxes and scores of the selected tokens themselves.
    pub proposal: LayerOutput,
}

/// Ranks token rows of `scores` by their best valid score; ties keep the
/// lower index first.
pub fn rank_tokens(scores: &Tensor, valid: &[bool], k: usize) -> Result<Vec<usize>> {
    let (m, n) = scores.dims2()?;
    if k > m {
        return Err(Error::Capacity {
            what: "query selection",
            requested: k,
            available: m,
        });
    }
    if n != valid.len() || !valid.iter().any(|&v| v) {
        return Err(Error::DegenerateMask { op: "select_queries" });
    }
    let best: Vec<f64> = (0..m)
        .map(|i| {
            (0..n)
                .filter(|&j| valid[j])
                .map(|j| scores.at(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

pub fn select_queries(
    tape: &mut Tape<'_>,
    enhanced: &EnhancedState,
    head: &ContrastiveHead,
    box_head: &BoxHead,
    anchors: &[BoxCxcywh],
    k: usize,
) -> Result<QuerySet> {
    let all_scores = contrastive_scores(tape, enhanced.memory, &enhanced.text, head)?;
    if anchors.len() != tape.value(all_scores).rows() {
        return Err(Error::Contract(format!(
            "{} anchors for {} tokens",
            anchors.len(),
            tape.value(all_scores).rows()
        )));
    }
    let token_index = rank_tokens(tape.value(all_scores), &enhanced.text.valid, k)?;
    let content = tape.gather_rows(enhanced.memory, &token_index)?;
    let scores = tape.gather_rows(all_scores, &token_index)?;
    let picked: Vec<BoxCxcywh> = token_index.iter().map(|&i| anchors[i]).collect();
    let boxes = box_head.refine(tape, content, &picked)?;
    let reference = tensor_to_boxes(tape.value(boxes));
    Ok(QuerySet {
        content,
        reference,
        token_index,
        proposal: LayerOutput { boxes, scores, gate: None },
    })
}

/// Text-guided query enhancement; the same computation as the encoder's
/// text-guided feature enhancement, applied to object queries.
pub fn tg_qe(
    tape: &mut Tape<'_>,
    queries: Var,
    text: &TextState,
    params: &FusionParams,
    apply_gate: bool,
) -> Result<(Var, Var)> {
    tg_fe(tape, queries, text, params, apply_gate)
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    self_attn: FusionParams,
    self_gain: ParamId,
    self_shift: ParamId,
    attn: FusionParams,
    attn_gain: ParamId,
    attn_shift: ParamId,
    ffn: MixingParams,
    box_head: BoxHead,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Shared by every decoder layer.
    pub tg_qe: FusionParams,
    pub pos_proj: ParamId,
    pub pos_freqs: usize,
    pub proposal_box: BoxHead,
    pub layers: Vec<DecoderLayerParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub channels: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pos_freqs: usize,
}

impl DecoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, dims: DecoderDims, rng: &mut R) -> Result<Self> {
        let c = dims.channels;
        let tg_qe = FusionParams::init_text_guided(store, "decoder.tg_qe", c, dims.text_dim, dims.attn_dim, rng)?;
        let pos_width = 8 * dims.pos_freqs;
        let pos_proj = store.add_uniform("decoder.pos_proj", &[pos_width, c], pos_width, rng)?;
        let proposal_box = BoxHead::init(store, "decoder.proposal_box", c, rng)?;
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let p = format!("decoder.layer{l}");
            let self_attn = FusionParams {
                query: store.add_uniform(&format!("{p}.self.w_q"), &[c, dims.attn_dim], c, rng)?,
                key: store.add_uniform(&format!("{p}.self.w_k"), &[c, dims.attn_dim], c, rng)?,
                value: store.add_uniform(&format!("{p}.self.w_v"), &[c, c], c, rng)?,
                attn_dim: dims.attn_dim,
            };
            let attn = FusionParams {
                query: store.add_uniform(&format!("{p}.attn.w_q"), &[c, dims.attn_dim], c, rng)?,
                key: store.add_uniform(&format!("{p}.attn.w_k"), &[c, dims.attn_dim], c, rng)?,
                value: store.add_uniform(&format!("{p}.attn.w_v"), &[c, c], c, rng)?,
                attn_dim: dims.attn_dim,
            };
            layers.push(DecoderLayerParams {
                self_attn,
                self_gain: store.add_full(&format!("{p}.self.ln_gain"), &[c], 1.0)?,
                self_shift: store.add_full(&format!("{p}.self.ln_shift"), &[c], 0.0)?,
                attn,
                attn_gain: store.add_full(&format!("{p}.attn.ln_gain"), &[c], 1.0)?,
                attn_shift: store.add_full(&format!("{p}.attn.ln_shift"), &[c], 0.0)?,
                ffn: MixingParams::init(store, &format!("{p}.ffn"), c, dims.hidden, rng)?,
                box_head: BoxHead::init(store, &format!("{p}.box"), c, rng)?,
            });
        }
        Ok(Self {
            tg_qe,
            pos_proj,
            pos_freqs: dims.pos_freqs,
            proposal_box,
            layers,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderFlags {
    pub tg_qe: bool,
    pub gate: bool,
}

/// Runs all decoder layers; one [`LayerOutput`] per layer, last = final.
pub fn decoder_forward(
    tape: &mut Tape<'_>,
    enhanced: &EnhancedState,
    queries: &QuerySet,
    anchors: &[BoxCxcywh],
    head: &ContrastiveHead,
    params: &DecoderParams,
    flags: DecoderFlags,
) -> Result<Vec<LayerOutput>> {
    if params.layers.is_empty() {
        return Err(Error::Contract("decoder needs at least one layer".into()));
    }
    let pos_proj = tape.param(params.pos_proj);
    let token_pos = tape.constant(box_position_features(anchors, params.pos_freqs));
    let token_pos = tape.matmul(token_pos, pos_proj)?;
    let keyed_memory = tape.add(enhanced.memory, token_pos)?;

    let mut q = queries.content;
    let mut reference = queries.reference.clone();
    let mut outputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut gate = None;
        if flags.tg_qe {
            let (enhanced_q, g) = tg_qe(tape, q, &enhanced.text, &params.tg_qe, flags.gate)?;
            q = enhanced_q;
            gate = Some(g);
        }
        let qpos = tape.constant(box_position_features(&reference, params.pos_freqs));
        let qpos = tape.matmul(qpos, pos_proj)?;
        let qp = tape.add(q, qpos)?;

        // Query self-attention, so queries on the same object can tell each
        // other apart.
        let sa = attend(tape, qp, qp, q, &layer.self_attn)?;
        let q0 = tape.add(q, sa)?;
        q = affine_norm(tape, q0, layer.self_gain, layer.self_shift)?;
        let qp = tape.add(q, qpos)?;

        let attended = attend(tape, qp, keyed_memory, enhanced.memory, &layer.attn)?;
        let q1 = tape.add(q, attended)?;
        let q1 = affine_norm(tape, q1, layer.attn_gain, layer.attn_shift)?;
        q = feed_forward(tape, q1, &layer.ffn)?;

        let boxes = layer.box_head.refine(tape, q, &reference)?;
        let scores = contrastive_scores(tape, q, &enhanced.text, head)?;
        reference = tensor_to_boxes(tape.value(boxes));
        outputs.push(LayerOutput { boxes, scores, gate });
    }
    Ok(outputs)
}

/// Single-head `softmax(q W_q (k W_k)ᵀ / sqrt(d_h)) · v W_v`.
fn attend(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, p: &FusionParams) -> Result<Var> {
    let wq = tape.param(p.query);
    let wk = tape.param(p.key);
    let wv = tape.param(p.value);
    let qa = tape.matmul(q, wq)?;
    let ka = tape.matmul(k, wk)?;
    let va = tape.matmul(v, wv)?;
    let kt = tape.transpose(ka)?;
    let logits = tape.matmul(qa, kt)?;
    let logits = tape.scale(logits, 1.0 / math::sqrt(p.attn_dim as f64))?;
    let weights = tape.softmax_rows(logits, None)?;
    tape.matmul(weights, va)
}

/// Decoded predictions of one image: boxes and `σ(S)` per valid class.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<BoxCxcywh>,
    /// `[N, classes.len()]` probabilities.
    pub scores: Tensor,
    /// Vocabulary index of every score column.
    pub classes: Vec<usize>,
}

impl DetectionSet {
    /// Drops padding columns and squashes scores.
    pub fn from_output(tape: &Tape<'_>, out: &LayerOutput, slot_to_class: &[Option<usize>]) -> Result<Self> {
        let boxes = tensor_to_boxes(tape.value(out.boxes));
        let s = tape.value(out.scores);
        let (n, slots) = s.dims2()?;
        if slots != slot_to_class.len() {
            return Err(Error::Contract(format!("{slots} score columns for {} slots", slot_to_class.len())));
        }
        let cols: Vec<(usize, usize)> = slot_to_class
            .iter()
            .enumerate()
            .filter_map(|(j, c)| c.map(|c| (j, c)))
            .collect();
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            for &(j, _) in &cols {
                data.push(math::sigmoid(s.at(i, j)));
            }
        }
        Ok(Self {
            boxes,
            scores: Tensor::new(&[n, cols.len()], data)?,
            classes: cols.into_iter().map(|(_, c)| c).collect(),
        })
    }
}
