//! Flat `key=value` run configuration. Precedence: command line, then the
//! config file, then built-in defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ovd_core::metrics::{coco_thresholds, EvalConfig, Protocol};
use ovd_core::model::{ModelConfig, TrainConfig};
use ovd_core::optim::OptimizerKind;
use ovd_core::scene::{default_colors, SceneSpec, ShapeKind};
use ovd_core::tiling::TileSpec;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenes: SceneSpec,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub tile: TileSpec,
    pub protocol: Protocol,
    pub eval_split: String,
    pub score_floor: f64,
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scenes: SceneSpec::default(),
            train_scenes: 2000,
            eval_scenes: 200,
            tile: TileSpec::default(),
            protocol: Protocol::Gzsd,
            eval_split: "eval".into(),
            score_floor: 0.0,
            max_dets: 100,
            iou_thresholds: coco_thresholds(),
            data_dir: PathBuf::from("data"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| anyhow::anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => bail!("config key `{key}`: expected true or false, got `{v}`"),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.scenes;
        vec![
            ("seed", self.seed.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.text_dim", m.text_dim.to_string()),
            ("model.attn_dim", m.attn_dim.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.layers", m.decoder_layers.to_string()),
            ("model.queries", m.queries.to_string()),
            ("model.pos_freqs", m.pos_freqs.to_string()),
            ("head.alpha", m.head_alpha.to_string()),
            ("head.beta", m.head_beta.to_string()),
            ("loss.lambda", m.loss.lambda_con.to_string()),
            ("loss.mu", m.loss.mu_giou.to_string()),
            ("loss.nu", m.loss.nu_l1.to_string()),
            ("loss.vfl_alpha", m.loss.vfl_alpha.to_string()),
            ("loss.vfl_gamma", m.loss.vfl_gamma.to_string()),
            ("match.class", m.matching.class.to_string()),
            ("match.l1", m.matching.l1.to_string()),
            ("match.giou", m.matching.giou.to_string()),
            ("match.focal_alpha", m.matching.focal_alpha.to_string()),
            ("match.focal_gamma", m.matching.focal_gamma.to_string()),
            ("ablation.tg_fe", m.ablation.tg_fe.to_string()),
            ("ablation.vg_tr", m.ablation.vg_tr.to_string()),
            ("ablation.tg_qe", m.ablation.tg_qe.to_string()),
            ("ablation.gate", m.ablation.gate.to_string()),
            ("train.optimizer", t.optimizer.as_str().to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch_size.to_string()),
            ("train.clip", t.clip.unwrap_or(0.0).to_string()),
            ("train.class_slots", t.class_slots.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("data.width", s.width.to_string()),
            ("data.height", s.height.to_string()),
            ("data.shapes", s.shapes.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")),
            ("data.colors", s.colors.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(",")),
            ("data.objects_min", s.objects.0.to_string()),
            ("data.objects_max", s.objects.1.to_string()),
            ("data.size_min", s.object_size.0.to_string()),
            ("data.size_max", s.object_size.1.to_string()),
            ("data.color_jitter", s.color_jitter.to_string()),
            ("data.noise", s.noise.to_string()),
            ("data.clutter", s.clutter.to_string()),
            ("data.max_overlap", s.max_overlap_iou.to_string()),
            ("data.novel", s.novel.join(",")),
            ("data.train_scenes", self.train_scenes.to_string()),
            ("data.eval_scenes", self.eval_scenes.to_string()),
            ("tile.size", self.tile.tile.to_string()),
            ("tile.stride", self.tile.stride.to_string()),
            ("tile.min_visible", self.tile.min_visible.to_string()),
            ("eval.protocol", self.protocol.as_str().to_string()),
            ("eval.split", self.eval_split.clone()),
            ("eval.score_floor", self.score_floor.to_string()),
            ("eval.max_dets", self.max_dets.to_string()),
            ("eval.iou_thresholds", join_f64(&self.iou_thresholds)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.scenes;
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                t.seed = self.seed;
                s.seed = self.seed;
            }
            "model.channels" => m.channels = num(key, v)?,
            "model.text_dim" => m.text_dim = num(key, v)?,
            "model.attn_dim" => m.attn_dim = num(key, v)?,
            "model.hidden" => m.hidden = num(key, v)?,
            "model.layers" => m.decoder_layers = num(key, v)?,
            "model.queries" => m.queries = num(key, v)?,
            "model.pos_freqs" => m.pos_freqs = num(key, v)?,
            "head.alpha" => m.head_alpha = num(key, v)?,
            "head.beta" => m.head_beta = num(key, v)?,
            "loss.lambda" => m.loss.lambda_con = num(key, v)?,
            "loss.mu" => m.loss.mu_giou = num(key, v)?,
            "loss.nu" => m.loss.nu_l1 = num(key, v)?,
            "loss.vfl_alpha" => m.loss.vfl_alpha = num(key, v)?,
            "loss.vfl_gamma" => m.loss.vfl_gamma = num(key, v)?,
            "match.class" => m.matching.class = num(key, v)?,
            "match.l1" => m.matching.l1 = num(key, v)?,
            "match.giou" => m.matching.giou = num(key, v)?,
            "match.focal_alpha" => m.matching.focal_alpha = num(key, v)?,
            "match.focal_gamma" => m.matching.focal_gamma = num(key, v)?,
            "ablation.tg_fe" => m.ablation.tg_fe = flag(key, v)?,
            "ablation.vg_tr" => m.ablation.vg_tr = flag(key, v)?,
            "ablation.tg_qe" => m.ablation.tg_qe = flag(key, v)?,
            "ablation.gate" => m.ablation.gate = flag(key, v)?,
            "train.optimizer" => {
                t.optimizer = OptimizerKind::parse(v.trim())
                    .with_context(|| format!("config key `{key}`: unknown optimizer `{v}` (adam or sgd)"))?
            }
            "train.lr" => t.lr = num(key, v)?,
            "train.steps" => t.steps = num(key, v)?,
            "train.batch" => t.batch_size = num(key, v)?,
            "train.clip" => {
                let c: f64 = num(key, v)?;
                t.clip = (c > 0.0).then_some(c);
            }
            "train.class_slots" => t.class_slots = num(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v.trim()),
            "data.width" => s.width = num(key, v)?,
            "data.height" => s.height = num(key, v)?,
            "data.shapes" => {
                s.shapes = list(v)
                    .iter()
                    .map(|n| ShapeKind::parse(n).with_context(|| format!("config key `{key}`: unknown shape `{n}`")))
                    .collect::<Result<_>>()?
            }
            "data.colors" => {
                let all = default_colors();
                s.colors = list(v)
                    .iter()
                    .map(|n| {
                        all.iter()
                            .find(|c| c.name == *n)
                            .cloned()
                            .with_context(|| format!("config key `{key}`: unknown color `{n}`"))
                    })
                    .collect::<Result<_>>()?
            }
            "data.objects_min" => s.objects.0 = num(key, v)?,
            "data.objects_max" => s.objects.1 = num(key, v)?,
            "data.size_min" => s.object_size.0 = num(key, v)?,
            "data.size_max" => s.object_size.1 = num(key, v)?,
            "data.color_jitter" => s.color_jitter = num(key, v)?,
            "data.noise" => s.noise = num(key, v)?,
            "data.clutter" => s.clutter = num(key, v)?,
            "data.max_overlap" => s.max_overlap_iou = num(key, v)?,
            "data.novel" => s.novel = list(v),
            "data.train_scenes" => self.train_scenes = num(key, v)?,
            "data.eval_scenes" => self.eval_scenes = num(key, v)?,
            "tile.size" => self.tile.tile = num(key, v)?,
            "tile.stride" => self.tile.stride = num(key, v)?,
            "tile.min_visible" => self.tile.min_visible = num(key, v)?,
            "eval.protocol" => self.protocol = Protocol::parse(v.trim())?,
            "eval.split" => self.eval_split = v.trim().to_string(),
            "eval.score_floor" => self.score_floor = num(key, v)?,
            "eval.max_dets" => self.max_dets = num(key, v)?,
            "eval.iou_thresholds" => {
                self.iou_thresholds = list(v).iter().map(|x| num(key, x)).collect::<Result<_>>()?
            }
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected key=value", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}`: expected key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tile.validate()?;
        EvalConfig::new(self.iou_thresholds.clone(), self.protocol, self.score_floor)?;
        if self.train.batch_size == 0 || self.train.class_slots == 0 {
            bail!("train.batch and train.class_slots must be positive");
        }
        if !(self.train.lr > 0.0) {
            bail!("train.lr must be positive");
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// SHA-256 over the rendered configuration.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig::new(self.iou_thresholds.clone(), self.protocol, self.score_floor)?)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.set("data.novel", "red ring, blue square").unwrap();
        cfg.set("ablation.gate", "false").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), "t").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn cli_beats_file() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("train.steps=5\nseed=3 # comment\n", "f").unwrap();
        cfg.apply_overrides(&["train.steps=9".into()]).unwrap();
        assert_eq!((cfg.train.steps, cfg.seed), (9, 3));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::default().set("model.width", "3").is_err());
    }

    #[test]
    fn gate_flag_changes_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("ablation.gate", "false").unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
