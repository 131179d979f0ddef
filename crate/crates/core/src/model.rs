//! The assembled detector: configuration, parameter layout, forward pass,
//! objective, inference and the training loop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{check_image_shape, encode_image, BackboneParams};
use crate::boxes::BoxCxcywh;
use crate::decoder::{
    decoder_forward, select_queries, token_anchors, ContrastiveHead, DecoderDims, DecoderFlags,
    DecoderParams, DetectionSet, LayerOutput, QuerySet,
};
use crate::error::{Error, Result};
use crate::fusion::{encoder_forward, EncoderFlags, EncoderParams, EnhancedState, TextState};
use crate::loss::{total_loss, GroundTruth, LossBreakdown, LossWeights, MatchWeights};
use crate::metrics::Detection;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{sample_training_classes, ClassEmbeddingBank, SamplingPolicy};

/// Module switches. `gate` only matters where its host module runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub tg_fe: bool,
    pub vg_tr: bool,
    pub tg_qe: bool,
    pub gate: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            tg_fe: true,
            vg_tr: true,
            tg_qe: true,
            gate: true,
        }
    }
}

impl Ablation {
    pub fn none() -> Self {
        Self {
            tg_fe: false,
            vg_tr: false,
            tg_qe: false,
            gate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub hidden: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub pos_freqs: usize,
    pub head_alpha: f64,
    pub head_beta: f64,
    pub loss: LossWeights,
    pub matching: MatchWeights,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            text_dim: 64,
            attn_dim: 64,
            hidden: 128,
            decoder_layers: 3,
            queries: 30,
            pos_freqs: 4,
            head_alpha: 5.0,
            head_beta: -2.0,
            loss: LossWeights::default(),
            matching: MatchWeights::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("text_dim", self.text_dim),
            ("attn_dim", self.attn_dim),
            ("hidden", self.hidden),
            ("decoder_layers", self.decoder_layers),
            ("queries", self.queries),
            ("pos_freqs", self.pos_freqs),
        ];
        if let Some((name, _)) = dims.iter().find(|d| d.1 == 0) {
            return Err(Error::Contract(format!("model dimension `{name}` must be positive")));
        }
        if self.text_dim < 8 {
            return Err(Error::Contract("text_dim must be at least 8".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass leaves on the tape.
pub struct ForwardOutput {
    pub enhanced: EnhancedState,
    pub queries: QuerySet,
    /// Proposal stage first, final decoder layer last.
    pub stages: Vec<LayerOutput>,
}

impl ForwardOutput {
    pub fn last(&self) -> &LayerOutput {
        self.stages.last().expect("at least one stage")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: BackboneParams,
    encoder: EncoderParams,
    decoder: DecoderParams,
    head: ContrastiveHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let backbone = BackboneParams::init(&mut store, c, &mut rng)?;
        let encoder = EncoderParams::init(&mut store, c, config.text_dim, config.attn_dim, config.hidden, &mut rng)?;
        let head = ContrastiveHead::init(&mut store, c, config.text_dim, config.head_alpha, config.head_beta, &mut rng)?;
        let decoder = DecoderParams::init(
            &mut store,
            DecoderDims {
                channels: c,
                text_dim: config.text_dim,
                attn_dim: config.attn_dim,
                hidden: config.hidden,
                layers: config.decoder_layers,
                pos_freqs: config.pos_freqs,
            },
            &mut rng,
        )?;
        Ok(Self {
            config,
            params: store,
            backbone,
            encoder,
            decoder,
            head,
        })
    }

    /// Builds the layout for `config` and fills it from named tensors; every
    /// parameter must be supplied exactly once.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut seen = alloc::vec![false; model.params.len()];
        for (name, t) in named {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            if core::mem::replace(&mut seen[id.index()], true) {
                return Err(Error::Contract(format!("parameter `{name}` given twice")));
            }
            model.params.set(&name, t)?;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let (name, _) = model.params.iter().nth(i).expect("index in range");
            return Err(Error::Contract(format!("parameter `{name}` missing")));
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(n, t)| (n.into(), t.clone())).collect()
    }

    pub fn encoder_flags(&self) -> EncoderFlags {
        let a = self.config.ablation;
        EncoderFlags {
            tg_fe: a.tg_fe,
            vg_tr: a.vg_tr,
            gate: a.gate,
        }
    }

    pub fn decoder_flags(&self) -> DecoderFlags {
        let a = self.config.ablation;
        DecoderFlags {
            tg_qe: a.tg_qe,
            gate: a.gate,
        }
    }

    /// Runs the full network on a `[3, H, W]` image against a class bank.
    pub fn forward(&self, tape: &mut Tape<'_>, image: &Tensor, bank: &ClassEmbeddingBank) -> Result<ForwardOutput> {
        let (h, w) = check_image_shape(image.shape())?;
        if bank.dim() != self.config.text_dim {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("class embeddings of width {} for text_dim {}", bank.dim(), self.config.text_dim),
            });
        }
        let x = tape.constant(image.clone());
        let feats = encode_image(tape, &self.backbone, x)?;
        let text = TextState {
            embeddings: tape.constant(bank.embeddings().clone()),
            valid: bank.valid_mask().to_vec(),
        };
        let enhanced = encoder_forward(tape, &feats, &text, &self.encoder, self.encoder_flags())?;
        let anchors = token_anchors(&enhanced.features, h, w);
        let queries = select_queries(
            tape,
            &enhanced,
            &self.head,
            &self.decoder.proposal_box,
            &anchors,
            self.config.queries,
        )?;
        let layers = decoder_forward(
            tape,
            &enhanced,
            &queries,
            &anchors,
            &self.head,
            &self.decoder,
            self.decoder_flags(),
        )?;
        let mut stages = Vec::with_capacity(layers.len() + 1);
        stages.push(queries.proposal);
        stages.extend(layers);
        Ok(ForwardOutput {
            enhanced,
            queries,
            stages,
        })
    }

    /// Objective on one image; `normalizer` is the batch's ground-truth count
    /// floored at one.
    pub fn loss<'t>(
        &self,
        tape: &mut Tape<'t>,
        image: &Tensor,
        gt: &GroundTruth,
        bank: &ClassEmbeddingBank,
        normalizer: f64,
    ) -> Result<(Var, LossBreakdown)> {
        let out = self.forward(tape, image, bank)?;
        total_loss(
            tape,
            &out.stages,
            bank.slot_to_class(),
            bank.valid_mask(),
            gt,
            &self.config.loss,
            &self.config.matching,
            normalizer,
        )
    }

    /// Summed parameter gradients and loss parts over a batch, images taken
    /// in order.
    pub fn batch_gradients(&self, batch: &[(&Tensor, &GroundTruth, ClassEmbeddingBank)]) -> Result<(Vec<Tensor>, LossBreakdown)> {
        let normalizer = (batch.iter().map(|b| b.1.len()).sum::<usize>()).max(1) as f64;
        let mut grads: Option<Vec<Tensor>> = None;
        let mut sum = LossBreakdown {
            l_con: 0.0,
            l_giou: 0.0,
            l_l1: 0.0,
            total: 0.0,
            weights: self.config.loss,
        };
        for (image, gt, bank) in batch {
            let mut tape = Tape::new(&self.params);
            let (loss, parts) = self.loss(&mut tape, image, gt, bank, normalizer)?;
            let g = tape.backward(loss)?.into_param_grads();
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                    acc
                }
            });
            sum.l_con += parts.l_con;
            sum.l_giou += parts.l_giou;
            sum.l_l1 += parts.l_l1;
            sum.total += parts.total;
        }
        let grads = grads.ok_or_else(|| Error::Contract("empty batch".into()))?;
        Ok((grads, sum))
    }

    /// Final-layer predictions for one image.
    pub fn predict(&self, image: &Tensor, bank: &ClassEmbeddingBank) -> Result<DetectionSet> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, image, bank)?;
        DetectionSet::from_output(&tape, out.last(), bank.slot_to_class())
    }

    /// Flattened `(query, class)` detections scoring at least `floor`, best
    /// first, at most `max_dets`.
    pub fn detect(
        &self,
        image_id: u64,
        image: &Tensor,
        bank: &ClassEmbeddingBank,
        floor: f64,
        max_dets: usize,
    ) -> Result<Vec<Detection>> {
        let set = self.predict(image, bank)?;
        Ok(flatten_detections(image_id, &set, floor, max_dets))
    }
}

pub fn flatten_detections(image_id: u64, set: &DetectionSet, floor: f64, max_dets: usize) -> Vec<Detection> {
    let n = set.boxes.len();
    let k = set.classes.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..k {
            let score = set.scores.at(i, j);
            if score >= floor {
                out.push(Detection {
                    image_id,
                    class: set.classes[j],
                    bbox: set.boxes[i],
                    score,
                });
            }
        }
    }
    // Stable: equal scores keep query-then-class order.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_dets);
    out
}

/// One training image with normalized ground truth.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: Tensor,
    pub gt: GroundTruth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: Option<f64>,
    /// Class slots per image during training.
    pub class_slots: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 4,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            clip: Some(1.0),
            class_slots: 16,
            seed: 0,
        }
    }
}

/// Per-step record of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Minimizes the detection objective with per-image random class sampling.
///
/// Samples are visited in a fresh seeded shuffle every pass. `full_bank`
/// holds an embedding for every training-vocabulary class.
pub fn train(
    model: &mut Model,
    samples: &[TrainSample],
    full_bank: &ClassEmbeddingBank,
    vocab_len: usize,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if samples.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let policy = SamplingPolicy {
                n_slots: cfg.class_slots,
                seed: cfg.seed ^ ((step as u64) << 16) ^ b as u64,
            };
            let bank = sample_training_classes(full_bank, vocab_len, &s.gt.class_ids, policy)?;
            batch.push((&s.image, &s.gt, bank));
        }
        let (grads, loss) = model.batch_gradients(&batch).map_err(|e| diverged(step, &e))?;
        if !loss.total.is_finite() {
            return Err(Error::Contract(format!("non-finite loss at step {step}: {loss:?}")));
        }
        let grad_norm = opt.step(&mut model.params, &grads).map_err(|e| diverged(step, &e))?;
        let rec = StepRecord { step, loss, grad_norm };
        on_step(&rec);
        curve.push(rec);
    }
    Ok(curve)
}

fn diverged(step: usize, e: &Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Contract(format!("non-finite value at step {step}: {e}")),
        other => other.clone(),
    }
}

/// Normalized cxcywh boxes from pixel `[x, y, w, h]`.
pub fn normalize_xywh(b: [f64; 4], width: usize, height: usize) -> BoxCxcywh {
    let (w, h) = (width as f64, height as f64);
    [(b[0] + 0.5 * b[2]) / w, (b[1] + 0.5 * b[3]) / h, b[2] / w, b[3] / h]
}

/// Pixel `[x, y, w, h]` from a normalized cxcywh box.
pub fn denormalize_cxcywh(b: BoxCxcywh, width: usize, height: usize) -> [f64; 4] {
    let (w, h) = (width as f64, height as f64);
    [(b[0] - 0.5 * b[2]) * w, (b[1] - 0.5 * b[3]) * h, b[2] * w, b[3] * h]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{embed_class_names, ClassVocabulary};
    use alloc::vec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 8,
            text_dim: 8,
            attn_dim: 4,
            hidden: 8,
            decoder_layers: 1,
            queries: 5,
            pos_freqs: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_is_finite_and_has_grads() {
        let model = Model::new(tiny(), 3).unwrap();
        let vocab = ClassVocabulary::open(&["red circle", "blue square"]).unwrap();
        let bank = embed_class_names(&vocab, 8).unwrap();
        let image = Tensor::full(&[3, 32, 32], 0.3);
        let gt = GroundTruth::new(vec![[0.5, 0.5, 0.25, 0.25]], vec![1]).unwrap();
        let (grads, parts) = model.batch_gradients(&[(&image, &gt, bank)]).unwrap();
        assert!(parts.total.is_finite() && parts.total > 0.0);
        assert_eq!(grads.len(), model.params.len());
    }

    #[test]
    fn named_round_trip() {
        let a = Model::new(tiny(), 9).unwrap();
        let b = Model::from_named(tiny(), a.named_params()).unwrap();
        assert_eq!(a.params.tensors(), b.params.tensors());
        let mut missing = a.named_params();
        missing.pop();
        assert!(Model::from_named(tiny(), missing).is_err());
    }

    #[test]
    fn too_many_queries_is_capacity() {
        let cfg = ModelConfig { queries: 1000, ..tiny() };
        let model = Model::new(cfg, 0).unwrap();
        let vocab = ClassVocabulary::open(&["a"]).unwrap();
        let bank = embed_class_names(&vocab, 8).unwrap();
        let r = model.predict(&Tensor::zeros(&[3, 32, 32]), &bank);
        assert!(matches!(r, Err(Error::Capacity { .. })));
    }

    #[test]
    fn box_normalization_round_trip() {
        let b = [10.0, 20.0, 6.0, 8.0];
        let n = normalize_xywh(b, 64, 32);
        assert_eq!(denormalize_cxcywh(n, 64, 32), b);
    }
}
