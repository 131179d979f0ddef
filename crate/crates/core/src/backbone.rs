//! Patch-embedding image encoder with three output scales.
//!
//! Each level cuts the raw image into non-overlapping patches (8, 16 and 32
//! pixels), projects every flattened patch linearly to the shared channel
//! width, applies SiLU and a per-token layer norm with learned gain and
//! shift.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct LevelParams {
    proj: ParamId,
    bias: ParamId,
    gain: ParamId,
    shift: ParamId,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    levels: [LevelParams; 3],
    channels: usize,
}

impl BackboneParams {
    pub fn init<R: Rng>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Result<Self> {
        let mut levels = Vec::with_capacity(3);
        for (i, &p) in STRIDES.iter().enumerate() {
            let fan_in = 3 * p * p;
            levels.push(LevelParams {
                proj: store.add_uniform(&format!("backbone.l{i}.proj"), &[fan_in, channels], fan_in, rng)?,
                bias: store.add_full(&format!("backbone.l{i}.bias"), &[channels], 0.0)?,
                gain: store.add_full(&format!("backbone.l{i}.ln_gain"), &[channels], 1.0)?,
                shift: store.add_full(&format!("backbone.l{i}.ln_shift"), &[channels], 0.0)?,
            });
        }
        Ok(Self {
            levels: [levels[0], levels[1], levels[2]],
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// One flattened feature map: `tokens` is `[height * width, C]`, row-major
/// over the grid.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLevel {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl FeatureLevel {
    pub fn token_count(&self) -> usize {
        self.height * self.width
    }
}

/// The three feature levels of one image, finest first.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureLevel>,
}

impl MultiScaleFeatures {
    pub fn token_count(&self) -> usize {
        self.levels.iter().map(FeatureLevel::token_count).sum()
    }

    /// All tokens of all levels stacked finest level first.
    pub fn concat(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let parts: Vec<Var> = self.levels.iter().map(|l| l.tokens).collect();
        tape.concat_rows(&parts)
    }
}

/// Source metadata of an image fed to the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageMeta {
    pub id: u64,
    pub original_size: (usize, usize),
    pub tile_offset: (usize, usize),
}

/// Images as `[3, H, W]` tensors with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub pixels: Vec<Tensor>,
    pub meta: Vec<ImageMeta>,
}

impl ImageBatch {
    pub fn new(pixels: Vec<Tensor>, meta: Vec<ImageMeta>) -> Result<Self> {
        if pixels.len() != meta.len() {
            return Err(Error::Contract(format!(
                "{} images but {} metadata entries",
                pixels.len(),
                meta.len()
            )));
        }
        for p in &pixels {
            check_image_shape(p.shape())?;
        }
        Ok(Self { pixels, meta })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Returns `(H, W)` of a `[3, H, W]` image with sides divisible by 32.
pub fn check_image_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [3, h, w] if h > 0 && w > 0 && h % 32 == 0 && w % 32 == 0 => Ok((h, w)),
        [3, h, w] => shape_err("encode_image", format!("{h}x{w} is not a multiple of 32")),
        _ => shape_err("encode_image", format!("expected [3, H, W], got {shape:?}")),
    }
}

pub fn encode_image(tape: &mut Tape<'_>, params: &BackboneParams, image: Var) -> Result<MultiScaleFeatures> {
    let (h, w) = check_image_shape(tape.value(image).shape())?;
    let mut levels = Vec::with_capacity(3);
    for (lp, &stride) in params.levels.iter().zip(&STRIDES) {
        let patches = tape.patchify(image, stride)?;
        let proj = tape.param(lp.proj);
        let x = tape.matmul(patches, proj)?;
        let bias = tape.param(lp.bias);
        let x = tape.add_row(x, bias)?;
        let x = tape.silu(x)?;
        let x = tape.layer_norm_rows(x, LN_EPS)?;
        let gain = tape.param(lp.gain);
        let x = tape.mul_row(x, gain)?;
        let shift = tape.param(lp.shift);
        let tokens = tape.add_row(x, shift)?;
        levels.push(FeatureLevel {
            tokens,
            height: h / stride,
            width: w / stride,
            stride,
        });
    }
    Ok(MultiScaleFeatures { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(channels: usize) -> (ParamStore, BackboneParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bp = BackboneParams::init(&mut store, channels, &mut rng).unwrap();
        (store, bp)
    }

    #[test]
    fn grid_sizes_follow_strides() {
        let (store, bp) = setup(8);
        let mut tape = Tape::new(&store);
        let img = tape.constant(Tensor::full(&[3, 64, 64], 0.3));
        let f = encode_image(&mut tape, &bp, img).unwrap();
        let dims: Vec<(usize, usize)> = f.levels.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(dims, [(8, 8), (4, 4), (2, 2)]);
        for l in &f.levels {
            assert_eq!(tape.value(l.tokens).shape(), &[l.token_count(), 8]);
        }
        assert_eq!(f.token_count() as f64, 64.0 * 64.0 * (1.0 / 64.0 + 1.0 / 256.0 + 1.0 / 1024.0));
    }

    #[test]
    fn zero_image_gives_zero_tokens() {
        let (store, bp) = setup(8);
        let mut tape = Tape::new(&store);
        let img = tape.constant(Tensor::zeros(&[3, 32, 64]));
        let f = encode_image(&mut tape, &bp, img).unwrap();
        for l in &f.levels {
            assert!(tape.value(l.tokens).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_sides_not_divisible_by_32() {
        let (store, bp) = setup(8);
        let mut tape = Tape::new(&store);
        let img = tape.constant(Tensor::zeros(&[3, 48, 64]));
        assert!(matches!(encode_image(&mut tape, &bp, img), Err(Error::Shape { .. })));
    }
}
