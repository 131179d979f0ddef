//! Image-text collaboration encoder.
//!
//! Text-guided feature enhancement injects class embeddings into visual
//! tokens through single-head cross attention, scaled per token by the
//! sigmoid of that token's largest attention logit over the valid class
//! slots. Tokens that match no class get a small gate and receive little
//! text. Visual-guided text refinement runs the opposite direction once,
//! over the tokens of all levels, and leaves padding slots untouched.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{FeatureLevel, MultiScaleFeatures, LN_EPS};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query, key and value projections of one cross-attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub attn_dim: usize,
}

impl FusionParams {
    /// Visual (or query) side attends to text: `C -> d_h`, `d -> d_h`, `d -> C`.
    pub fn init_text_guided<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        text_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: store.add_uniform(&format!("{prefix}.w_q"), &[channels, attn_dim], channels, rng)?,
            key: store.add_uniform(&format!("{prefix}.w_k"), &[text_dim, attn_dim], text_dim, rng)?,
            value: store.add_uniform(&format!("{prefix}.w_v"), &[text_dim, channels], text_dim, rng)?,
            attn_dim,
        })
    }

    /// Text attends to visual tokens: `d -> d_h`, `C -> d_h`, `C -> d`.
    pub fn init_visual_guided<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        text_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: store.add_uniform(&format!("{prefix}.w_q"), &[text_dim, attn_dim], text_dim, rng)?,
            key: store.add_uniform(&format!("{prefix}.w_k"), &[channels, attn_dim], channels, rng)?,
            value: store.add_uniform(&format!("{prefix}.w_v"), &[channels, text_dim], channels, rng)?,
            attn_dim,
        })
    }
}

/// Class embeddings on a tape together with their slot validity.
#[derive(Clone, Debug)]
pub struct TextState {
    pub embeddings: Var,
    pub valid: Vec<bool>,
}

impl TextState {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// `base + softmax(logits) · values ⊙ σ(rowmax(logits))`, with softmax and
/// max restricted to valid columns. Returns the output and the `[m, 1]`
/// gate. With `apply_gate == false` the gate is still computed but the
/// multiply is skipped.
pub fn gated_injection(
    tape: &mut Tape<'_>,
    base: Var,
    logits: Var,
    values: Var,
    valid: &[bool],
    apply_gate: bool,
) -> Result<(Var, Var)> {
    let weights = tape.softmax_rows(logits, Some(valid))?;
    let injected = tape.matmul(weights, values)?;
    let peak = tape.row_max(logits, Some(valid))?;
    let gate = tape.sigmoid(peak)?;
    let injected = if apply_gate {
        tape.mul_col(injected, gate)?
    } else {
        injected
    };
    Ok((tape.add(base, injected)?, gate))
}

/// Scaled dot-product logits `(x W_q)(y W_k)ᵀ / sqrt(d_h)`.
fn attention_logits(tape: &mut Tape<'_>, x: Var, y: Var, params: &FusionParams) -> Result<Var> {
    let wq = tape.param(params.query);
    let wk = tape.param(params.key);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(y, wk)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    tape.scale(logits, 1.0 / math::sqrt(params.attn_dim as f64))
}

/// Text-guided enhancement of `[tokens, C]` visual (or query) features.
pub fn tg_fe(
    tape: &mut Tape<'_>,
    tokens: Var,
    text: &TextState,
    params: &FusionParams,
    apply_gate: bool,
) -> Result<(Var, Var)> {
    if text.valid_count() == 0 {
        return Err(Error::DegenerateMask { op: "tg_fe" });
    }
    let logits = attention_logits(tape, tokens, text.embeddings, params)?;
    let wv = tape.param(params.value);
    let values = tape.matmul(text.embeddings, wv)?;
    gated_injection(tape, tokens, logits, values, &text.valid, apply_gate)
}

/// Visual-guided refinement of the class embeddings against `[M, C]` tokens.
pub fn vg_tr(tape: &mut Tape<'_>, text: &TextState, visual: Var, params: &FusionParams) -> Result<Var> {
    if tape.value(visual).rows() == 0 {
        return Err(Error::Contract("vg_tr needs at least one visual token".into()));
    }
    let logits = attention_logits(tape, text.embeddings, visual, params)?;
    let weights = tape.softmax_rows(logits, None)?;
    let wv = tape.param(params.value);
    let values = tape.matmul(visual, wv)?;
    let update = tape.matmul(weights, values)?;
    let rows: Vec<f64> = text.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let row_mask = tape.constant(Tensor::new(&[rows.len(), 1], rows)?);
    let update = tape.mul_col(update, row_mask)?;
    tape.add(text.embeddings, update)
}

/// Pointwise two-layer feed-forward block with residual and layer norm.
#[derive(Clone, Copy, Debug)]
pub struct MixingParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    gain: ParamId,
    shift: ParamId,
}

impl MixingParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add_uniform(&format!("{prefix}.w1"), &[channels, hidden], channels, rng)?,
            b1: store.add_full(&format!("{prefix}.b1"), &[hidden], 0.0)?,
            w2: store.add_uniform(&format!("{prefix}.w2"), &[hidden, channels], hidden, rng)?,
            b2: store.add_full(&format!("{prefix}.b2"), &[channels], 0.0)?,
            gain: store.add_full(&format!("{prefix}.ln_gain"), &[channels], 1.0)?,
            shift: store.add_full(&format!("{prefix}.ln_shift"), &[channels], 0.0)?,
        })
    }
}

/// `LN(x + W2 silu(W1 x + b1) + b2)` with learned gain and shift.
pub fn feed_forward(tape: &mut Tape<'_>, x: Var, p: &MixingParams) -> Result<Var> {
    let w1 = tape.param(p.w1);
    let h = tape.matmul(x, w1)?;
    let b1 = tape.param(p.b1);
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h)?;
    let w2 = tape.param(p.w2);
    let h = tape.matmul(h, w2)?;
    let b2 = tape.param(p.b2);
    let h = tape.add_row(h, b2)?;
    let y = tape.add(x, h)?;
    affine_norm(tape, y, p.gain, p.shift)
}

pub(crate) fn affine_norm(tape: &mut Tape<'_>, x: Var, gain: ParamId, shift: ParamId) -> Result<Var> {
    let y = tape.layer_norm_rows(x, LN_EPS)?;
    let g = tape.param(gain);
    let y = tape.mul_row(y, g)?;
    let s = tape.param(shift);
    tape.add_row(y, s)
}

/// Which fusion branches run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderFlags {
    pub tg_fe: bool,
    pub vg_tr: bool,
    pub gate: bool,
}

impl Default for EncoderFlags {
    fn default() -> Self {
        Self {
            tg_fe: true,
            vg_tr: true,
            gate: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// One set for all three levels.
    pub tg_fe: FusionParams,
    pub vg_tr: FusionParams,
    pub mixing: [MixingParams; 3],
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        channels: usize,
        text_dim: usize,
        attn_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let tg_fe = FusionParams::init_text_guided(store, "encoder.tg_fe", channels, text_dim, attn_dim, rng)?;
        let vg_tr = FusionParams::init_visual_guided(store, "encoder.vg_tr", channels, text_dim, attn_dim, rng)?;
        let m0 = MixingParams::init(store, "encoder.mix.l0", channels, hidden, rng)?;
        let m1 = MixingParams::init(store, "encoder.mix.l1", channels, hidden, rng)?;
        let m2 = MixingParams::init(store, "encoder.mix.l2", channels, hidden, rng)?;
        Ok(Self {
            tg_fe,
            vg_tr,
            mixing: [m0, m1, m2],
        })
    }
}

/// Encoder output: enhanced levels, their concatenation, refined text.
#[derive(Clone, Debug)]
pub struct EnhancedState {
    pub features: MultiScaleFeatures,
    /// All enhanced tokens, finest level first.
    pub memory: Var,
    pub text: TextState,
    /// Per-level `[tokens, 1]` sigmoid gates; `None` when text-guided
    /// enhancement is disabled.
    pub gate_maps: Vec<Option<Var>>,
}

pub fn encoder_forward(
    tape: &mut Tape<'_>,
    feats: &MultiScaleFeatures,
    text: &TextState,
    params: &EncoderParams,
    flags: EncoderFlags,
) -> Result<EnhancedState> {
    let mut levels = Vec::with_capacity(feats.levels.len());
    let mut gate_maps = Vec::with_capacity(feats.levels.len());
    for (level, mixing) in feats.levels.iter().zip(&params.mixing) {
        let (x, gate) = if flags.tg_fe {
            let (x, g) = tg_fe(tape, level.tokens, text, &params.tg_fe, flags.gate)?;
            (x, Some(g))
        } else {
            (level.tokens, None)
        };
        let x = feed_forward(tape, x, mixing)?;
        levels.push(FeatureLevel { tokens: x, ..*level });
        gate_maps.push(gate);
    }
    let features = MultiScaleFeatures { levels };
    let memory = features.concat(tape)?;
    let text = if flags.vg_tr {
        TextState {
            embeddings: vg_tr(tape, text, memory, &params.vg_tr)?,
            valid: text.valid.clone(),
        }
    } else {
        text.clone()
    };
    Ok(EnhancedState {
        features,
        memory,
        text,
        gate_maps,
    })
}
