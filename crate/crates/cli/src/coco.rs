//! COCO-style JSON subset: `images`, `annotations`, `categories`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ovd_core::scene::{AnnotationRecord, ObjectAnnotation};
use ovd_core::text::{normalize_name, ClassVocabulary};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub records: Vec<AnnotationRecord>,
    pub vocabulary: ClassVocabulary,
    /// Boxes that had to be clipped to their image.
    pub clipped: usize,
}

/// Categories are numbered from 1 in vocabulary order.
pub fn to_coco(records: &[AnnotationRecord], vocab: &ClassVocabulary) -> Result<CocoFile> {
    let mut annotations = Vec::new();
    for r in records {
        for o in &r.objects {
            let c = vocab
                .index_of(&o.class_name)
                .with_context(|| format!("image {}: class `{}` not in the vocabulary", r.image_id, o.class_name))?;
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: r.image_id,
                category_id: c as u64 + 1,
                bbox: o.bbox,
            });
        }
    }
    Ok(CocoFile {
        images: records
            .iter()
            .map(|r| CocoImage {
                id: r.image_id,
                file_name: r.file_name.clone(),
                width: r.width,
                height: r.height,
            })
            .collect(),
        annotations,
        categories: vocab
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
            .collect(),
    })
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord], vocab: &ClassVocabulary) -> Result<()> {
    let file = to_coco(records, vocab)?;
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Validates and clips; records come out sorted by image id, objects in
/// annotation id order.
pub fn from_coco(file: CocoFile) -> Result<Loaded> {
    let mut cats: BTreeMap<u64, String> = BTreeMap::new();
    for (i, c) in file.categories.iter().enumerate() {
        if cats.insert(c.id, normalize_name(&c.name)).is_some() {
            bail!("categories[{i}]: duplicate category id {}", c.id);
        }
    }
    let names: Vec<&String> = cats.values().collect();
    let vocabulary = ClassVocabulary::open(&names).context("categories")?;

    let mut images: BTreeMap<u64, AnnotationRecord> = BTreeMap::new();
    for (i, im) in file.images.iter().enumerate() {
        if im.width == 0 || im.height == 0 {
            bail!("images[{i}] (id {}): zero-sized image", im.id);
        }
        let rec = AnnotationRecord {
            image_id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
            objects: Vec::new(),
        };
        if images.insert(im.id, rec).is_some() {
            bail!("images[{i}]: duplicate image id {}", im.id);
        }
    }

    let mut order: Vec<usize> = (0..file.annotations.len()).collect();
    order.sort_by_key(|&i| (file.annotations[i].image_id, file.annotations[i].id));
    let mut clipped = 0;
    for i in order {
        let a = &file.annotations[i];
        let loc = format!("annotations[{i}] (id {})", a.id);
        let name = cats
            .get(&a.category_id)
            .with_context(|| format!("{loc}: category id {} is not defined", a.category_id))?;
        let rec = images
            .get_mut(&a.image_id)
            .with_context(|| format!("{loc}: image id {} is not defined", a.image_id))?;
        let [x, y, w, h] = a.bbox;
        if !a.bbox.iter().all(|v| v.is_finite()) {
            bail!("{loc}: non-finite box");
        }
        let x1 = x.max(0.0);
        let y1 = y.max(0.0);
        let x2 = (x + w).min(rec.width as f64);
        let y2 = (y + h).min(rec.height as f64);
        let b = [x1, y1, x2 - x1, y2 - y1];
        if b[2] <= 0.0 || b[3] <= 0.0 {
            bail!("{loc}: malformed box {:?} (w or h <= 0 after clipping)", a.bbox);
        }
        if b != a.bbox {
            clipped += 1;
        }
        rec.objects.push(ObjectAnnotation { class_name: name.clone(), bbox: b });
    }
    Ok(Loaded {
        records: images.into_values().collect(),
        vocabulary,
        clipped,
    })
}

pub fn load_annotations(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CocoFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    from_coco(file).with_context(|| format!("loading {}", path.display()))
}
