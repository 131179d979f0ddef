//! The subcommands, callable in-process.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ovd_core::gradcheck::{run_suite, CaseReport};
use ovd_core::metrics::{evaluate, EvalReport, GtInstance, Protocol};
use ovd_core::model::{denormalize_cxcywh, train as train_loop, Model, ModelConfig, StepRecord};
use ovd_core::scene::{generate_scene, Partition, RgbImage};
use ovd_core::text::{embed_class_names, ClassEmbeddingBank, ClassRole, ClassVocabulary};
use ovd_core::tiling::tile_image;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::coco::{load_annotations, save_annotations};
use crate::config::{hex, RunConfig};
use crate::dataset::{
    annotations_path, base_vocabulary, dataset_vocabulary, ground_truth, image_path, load_split, training_samples,
    write_split,
};
use crate::manifest::RunManifest;
use crate::pngio::{read_png, write_png};
use crate::report::{class_csv, json_summary, loss_row, text_report, LOSS_HEADER};

/// Held-out base-only scenes come from the training generator starting here.
pub const HOLDOUT_OFFSET: usize = 1_000_000;

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn sha256_file(p: &Path) -> Result<String> {
    let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Runs `body` under a manifest at `path`: incomplete until `body` returns.
fn with_manifest<T>(
    path: &Path,
    command: &str,
    cfg: &RunConfig,
    deterministic: bool,
    body: impl FnOnce(&mut RunManifest) -> Result<T>,
) -> Result<T> {
    let mut m = RunManifest::begin(path, command, cfg, deterministic)?;
    match body(&mut m) {
        Ok(v) => {
            m.finish()?;
            Ok(v)
        }
        Err(e) => {
            m.abort(&e)?;
            Err(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub train: usize,
    pub eval: usize,
    pub holdout: usize,
    /// SHA-256 of each split's annotation file.
    pub checksums: Vec<(String, String)>,
}

/// Writes `train`, `eval` and (if `holdout > 0`) a base-only `holdout`
/// split, the vocabulary, the split file and a manifest.
pub fn generate(cfg: &RunConfig, out: &Path, holdout: usize, deterministic: bool) -> Result<GenerateSummary> {
    create_dir(out)?;
    with_manifest(&out.join("manifest.txt"), "generate", cfg, deterministic, |m| {
        let spec = &cfg.scenes;
        let vocab = spec.vocabulary()?;
        std::fs::write(out.join("vocabulary.txt"), vocab.render())?;
        let novel: String = vocab
            .indices_with_role(ClassRole::Novel)
            .iter()
            .map(|&c| format!("{}\n", vocab.name(c)))
            .collect();
        std::fs::write(out.join("novel.txt"), novel)?;

        let mut checksums = Vec::new();
        let splits: [(&str, Partition, usize, usize); 3] = [
            ("train", Partition::Train, cfg.train_scenes, 0),
            ("eval", Partition::Eval, cfg.eval_scenes, 0),
            ("holdout", Partition::Train, holdout, HOLDOUT_OFFSET),
        ];
        for (name, partition, count, offset) in splits {
            if name == "holdout" && count == 0 {
                continue;
            }
            let mut records = Vec::with_capacity(count);
            let mut images = Vec::with_capacity(count);
            for i in 0..count {
                let mut s = generate_scene(spec, partition, offset + i)?;
                if offset > 0 {
                    s.record.image_id = i as u64;
                    s.record.file_name = format!("{name}_{i:06}.png");
                }
                records.push(s.record);
                images.push(s.image);
            }
            write_split(out, name, &records, &images, &vocab)?;
            let sum = sha256_file(&annotations_path(out, name))?;
            m.push(format!("{name}.scenes"), count);
            m.push(format!("{name}.objects"), records.iter().map(|r| r.objects.len()).sum::<usize>());
            m.push(format!("{name}.annotations_sha256"), &sum);
            checksums.push((name.to_string(), sum));
        }
        Ok(GenerateSummary {
            train: cfg.train_scenes,
            eval: cfg.eval_scenes,
            holdout,
            checksums,
        })
    })
}

/// Tiles every image of `root/split` into `out` (same layout, split
/// `tiles`). Returns the tile count.
pub fn tile(cfg: &RunConfig, root: &Path, split: &str, out: &Path) -> Result<usize> {
    let loaded = load_annotations(&annotations_path(root, split))?;
    let img_dir = out.join("tiles").join("images");
    create_dir(&img_dir)?;
    let mut records = Vec::new();
    for r in &loaded.records {
        let img = read_png(&image_path(root, split, &r.file_name))?;
        let stem = r.file_name.trim_end_matches(".png");
        for t in tile_image(&img, &r.objects, &cfg.tile)? {
            let file_name = format!("{stem}_x{}_y{}.png", t.offset.0, t.offset.1);
            write_png(&img_dir.join(&file_name), &t.image)?;
            records.push(ovd_core::scene::AnnotationRecord {
                image_id: records.len() as u64,
                file_name,
                width: t.image.width,
                height: t.image.height,
                objects: t.objects,
            });
        }
    }
    save_annotations(&out.join("tiles").join("annotations.json"), &records, &loaded.vocabulary)?;
    Ok(records.len())
}

const MODEL_KEYS: [&str; 5] = ["model.", "head.", "loss.", "match.", "ablation."];

/// Model configuration recorded in a checkpoint header.
pub fn model_config_from_meta(meta: &[(String, String)]) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in meta {
        if MODEL_KEYS.iter().any(|p| k.starts_with(p)) {
            cfg.set(k, v).with_context(|| format!("checkpoint meta `{k}`"))?;
        }
    }
    cfg.model.validate()?;
    Ok(cfg.model)
}

pub fn model_to_checkpoint(model: &Model, cfg: &RunConfig) -> Checkpoint {
    let mut rc = cfg.clone();
    rc.model = model.config;
    Checkpoint {
        meta: rc
            .entries()
            .into_iter()
            .filter(|(k, _)| MODEL_KEYS.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        tensors: model.named_params(),
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let config = model_config_from_meta(&ck.meta)?;
    Model::from_named(config, ck.tensors).with_context(|| format!("restoring {}", path.display()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: Vec<StepRecord>,
}

/// Trains on `data.dir/train` with base classes only; writes
/// `manifest.txt`, `loss_curve.csv` and `model.ckpt` into `out`.
pub fn train(
    cfg: &RunConfig,
    out: &Path,
    deterministic: bool,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    create_dir(out)?;
    with_manifest(&out.join("manifest.txt"), "train", cfg, deterministic, |m| {
        let root = &cfg.data_dir;
        let vocab = dataset_vocabulary(root)?;
        let train_vocab = base_vocabulary(&vocab)?;
        let split = load_split(root, "train", &train_vocab).context("training split")?;
        let samples = training_samples(&split.records, &split.images, &train_vocab)?;
        m.push("train.images", samples.len());
        m.push("train.classes", train_vocab.names().join(","));

        let mut model = Model::new(cfg.model, cfg.seed)?;
        m.push("model.parameters", model.params.scalar_count());
        let bank = embed_class_names(&train_vocab, cfg.model.text_dim)?;
        let curve_path = out.join("loss_curve.csv");
        let mut curve = std::io::BufWriter::new(
            std::fs::File::create(&curve_path).with_context(|| format!("creating {}", curve_path.display()))?,
        );
        curve.write_all(LOSS_HEADER.as_bytes())?;
        let mut io_err = None;
        let steps = train_loop(&mut model, &samples, &bank, train_vocab.len(), &cfg.train, |r| {
            if let Err(e) = curve.write_all(loss_row(r).as_bytes()) {
                io_err.get_or_insert(e);
            }
            progress(r);
        });
        curve.flush()?;
        if let Some(e) = io_err {
            return Err(e).context("writing the loss curve");
        }
        let steps = steps?;

        let per_epoch = samples.len().div_ceil(cfg.train.batch_size).max(1);
        for (e, chunk) in steps.chunks(per_epoch).enumerate() {
            let mean = chunk.iter().map(|s| s.loss.total).sum::<f64>() / chunk.len() as f64;
            m.push(format!("loss.epoch{e}"), format!("{mean:.9e}"));
        }
        if let Some(last) = steps.last() {
            m.push("loss.final", format!("{:.9e}", last.loss.total));
        }
        m.push("steps_completed", steps.len());
        let ck = out.join("model.ckpt");
        model_to_checkpoint(&model, cfg).save(&ck)?;
        m.push("checkpoint", "model.ckpt");
        m.push("checkpoint_sha256", sha256_file(&ck)?);
        m.push("loss_curve", "loss_curve.csv");
        Ok(TrainOutcome { checkpoint: ck, steps })
    })
}

/// Class bank for a protocol: novel classes only for ZSD, everything
/// otherwise. Slots map to indices of `vocab`.
pub fn protocol_bank(vocab: &ClassVocabulary, protocol: Protocol, dim: usize) -> Result<ClassEmbeddingBank> {
    let full = embed_class_names(vocab, dim)?;
    match protocol {
        Protocol::Zsd => {
            let novel = vocab.indices_with_role(ClassRole::Novel);
            if novel.is_empty() {
                bail!("ZSD needs at least one novel class in the vocabulary");
            }
            Ok(full.select(&novel)?)
        }
        Protocol::Gzsd | Protocol::Closed => Ok(full),
    }
}

/// Detections and ground truth of `images` against `vocab`, then the
/// metrics.
pub fn evaluate_images(
    model: &Model,
    records: &[ovd_core::scene::AnnotationRecord],
    images: &[RgbImage],
    vocab: &ClassVocabulary,
    cfg: &RunConfig,
) -> Result<(EvalReport, usize)> {
    let bank = protocol_bank(vocab, cfg.protocol, model.config.text_dim)?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (r, img) in records.iter().zip(images) {
        dets.extend(model.detect(r.image_id, &img.to_tensor(), &bank, cfg.score_floor, cfg.max_dets)?);
        let gt = ground_truth(r, vocab)?;
        for (b, &c) in gt.boxes.iter().zip(&gt.class_ids) {
            gts.push(GtInstance {
                image_id: r.image_id,
                class: c,
                bbox: *b,
            });
        }
    }
    let n = dets.len();
    Ok((evaluate(&dets, &gts, vocab, &cfg.eval_config()?)?, n))
}

/// Evaluates a checkpoint on `data.dir/<eval.split>`; writes `report.txt`,
/// `summary.json`, `per_class.csv` and a manifest into `out`.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    vocab_file: Option<&Path>,
    out: &Path,
    deterministic: bool,
) -> Result<EvalReport> {
    create_dir(out)?;
    with_manifest(&out.join("manifest.txt"), "eval", cfg, deterministic, |m| {
        let model = load_model(checkpoint)?;
        let vocab = match vocab_file {
            Some(p) => crate::dataset::load_vocabulary(p)?,
            None => dataset_vocabulary(&cfg.data_dir)?,
        };
        let split = load_split(&cfg.data_dir, &cfg.eval_split, &vocab)?;
        let (report, n) = evaluate_images(&model, &split.records, &split.images, &vocab, cfg)?;
        std::fs::write(out.join("report.txt"), text_report(&report))?;
        std::fs::write(out.join("summary.json"), json_summary(&report, n, split.records.len()))?;
        std::fs::write(out.join("per_class.csv"), class_csv(&report))?;
        m.push("checkpoint_sha256", sha256_file(checkpoint)?);
        m.push("images", split.records.len());
        m.push("boxes_clipped", split.clipped);
        m.push("detections", n);
        m.push("report", "report.txt");
        m.push("summary", "summary.json");
        m.push("per_class", "per_class.csv");
        Ok(report)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferredBox {
    pub class: String,
    pub score: f64,
    /// Pixel `[x, y, w, h]`.
    pub bbox: [f64; 4],
}

/// Detections on one image for an arbitrary class list, best first.
pub fn infer(model: &Model, image: &RgbImage, vocab: &ClassVocabulary, floor: f64, max_dets: usize) -> Result<Vec<InferredBox>> {
    let bank = embed_class_names(vocab, model.config.text_dim)?;
    let dets = model.detect(0, &image.to_tensor(), &bank, floor, max_dets)?;
    Ok(dets
        .into_iter()
        .map(|d| InferredBox {
            class: vocab.name(d.class).to_string(),
            score: d.score,
            bbox: denormalize_cxcywh(d.bbox, image.width, image.height),
        })
        .collect())
}

pub fn gradcheck(instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    Ok(run_suite(instances, seed)?)
}
