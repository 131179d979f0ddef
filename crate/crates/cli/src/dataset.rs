//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/vocabulary.txt        one class per line, `\tnovel` marks novel ones
//! <dir>/novel.txt             split file: novel class names
//! <dir>/<split>/annotations.json
//! <dir>/<split>/images/*.png
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ovd_core::loss::GroundTruth;
use ovd_core::model::{normalize_xywh, TrainSample};
use ovd_core::scene::{AnnotationRecord, RgbImage};
use ovd_core::text::{normalize_name, ClassRole, ClassVocabulary};
use ovd_core::Tensor;

use crate::coco::{load_annotations, save_annotations};
use crate::pngio::{read_png, write_png};

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

pub fn annotations_path(root: &Path, split: &str) -> PathBuf {
    split_dir(root, split).join("annotations.json")
}

pub fn image_path(root: &Path, split: &str, file_name: &str) -> PathBuf {
    split_dir(root, split).join("images").join(file_name)
}

/// Novel names, one per line; blank lines and `#` comments skipped.
pub fn parse_split_file(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(normalize_name)
        .collect()
}

/// `vocab` with the listed classes marked novel.
pub fn apply_split(vocab: &ClassVocabulary, novel: &[String]) -> Result<ClassVocabulary> {
    let unknown: Vec<&String> = novel.iter().filter(|n| vocab.index_of(n).is_none()).collect();
    if !unknown.is_empty() {
        bail!("split file names classes outside the vocabulary: {unknown:?}");
    }
    let entries: Vec<(&str, ClassRole)> = vocab
        .names()
        .iter()
        .map(|n| {
            let role = if novel.contains(n) { ClassRole::Novel } else { ClassRole::Base };
            (n.as_str(), role)
        })
        .collect();
    Ok(ClassVocabulary::new(&entries)?)
}

pub fn load_vocabulary(path: &Path) -> Result<ClassVocabulary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading vocabulary {}", path.display()))?;
    ClassVocabulary::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn dataset_vocabulary(root: &Path) -> Result<ClassVocabulary> {
    load_vocabulary(&root.join("vocabulary.txt"))
}

/// Base classes only, in vocabulary order.
pub fn base_vocabulary(vocab: &ClassVocabulary) -> Result<ClassVocabulary> {
    let names: Vec<&str> = vocab
        .indices_with_role(ClassRole::Base)
        .into_iter()
        .map(|c| vocab.name(c))
        .collect();
    Ok(ClassVocabulary::open(&names)?)
}

pub fn write_split(root: &Path, split: &str, records: &[AnnotationRecord], images: &[RgbImage], vocab: &ClassVocabulary) -> Result<()> {
    let dir = split_dir(root, split).join("images");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (r, img) in records.iter().zip(images) {
        write_png(&image_path(root, split, &r.file_name), img)?;
    }
    save_annotations(&annotations_path(root, split), records, vocab)
}

/// One split with its images decoded.
pub struct Split {
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<RgbImage>,
    pub clipped: usize,
}

/// Loads a split and checks every annotated class against `vocab`.
pub fn load_split(root: &Path, split: &str, vocab: &ClassVocabulary) -> Result<Split> {
    let loaded = load_annotations(&annotations_path(root, split))?;
    let mut unknown: Vec<&str> = loaded
        .records
        .iter()
        .flat_map(|r| &r.objects)
        .map(|o| o.class_name.as_str())
        .filter(|n| vocab.index_of(n).is_none())
        .collect();
    unknown.sort_unstable();
    unknown.dedup();
    if !unknown.is_empty() {
        bail!("vocabulary mismatch: annotated classes not in the vocabulary: {}", unknown.join(", "));
    }
    let images = loaded
        .records
        .iter()
        .map(|r| {
            let img = read_png(&image_path(root, split, &r.file_name))?;
            if (img.width, img.height) != (r.width, r.height) {
                bail!("{}: image is {}x{}, annotations say {}x{}", r.file_name, img.width, img.height, r.width, r.height);
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    Ok(Split {
        records: loaded.records,
        images,
        clipped: loaded.clipped,
    })
}

/// Normalized boxes with class indices into `vocab`.
pub fn ground_truth(record: &AnnotationRecord, vocab: &ClassVocabulary) -> Result<GroundTruth> {
    let mut boxes = Vec::with_capacity(record.objects.len());
    let mut classes = Vec::with_capacity(record.objects.len());
    for o in &record.objects {
        let c = vocab
            .index_of(&o.class_name)
            .with_context(|| format!("image {}: class `{}` not in the vocabulary", record.image_id, o.class_name))?;
        boxes.push(normalize_xywh(o.bbox, record.width, record.height));
        classes.push(c);
    }
    Ok(GroundTruth::new(boxes, classes)?)
}

pub fn training_samples(records: &[AnnotationRecord], images: &[RgbImage], vocab: &ClassVocabulary) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .zip(images)
        .map(|(r, img)| {
            Ok(TrainSample {
                image: img.to_tensor(),
                gt: ground_truth(r, vocab)?,
            })
        })
        .collect()
}

pub fn tensors(images: &[RgbImage]) -> Vec<Tensor> {
    images.iter().map(RgbImage::to_tensor).collect()
}
