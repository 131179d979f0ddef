//! Synthetic color/shape detection scenes.
//!
//! Every object is a filled shape in one anchor color, labeled
//! `"<color> <shape>"`. Novel classes are chosen color/shape combinations
//! that never spawn in the training partition and do spawn in the
//! evaluation partition. Backgrounds carry noise and low-contrast clutter
//! rectangles that never carry labels.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::iou_xyxy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{normalize_name, ClassRole, ClassVocabulary};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                op: "rgb image",
                detail: format!("{width}x{height} needs {} bytes, got {}", width * height * 3, data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-first `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("image tensor shape")
    }

    /// Copy of the `w × h` window at `(x, y)`; parts outside the image are black.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
        let mut out = RgbImage::new(w, h);
        for yy in 0..h.min(self.height.saturating_sub(y)) {
            let src = ((y + yy) * self.width + x) * 3;
            let len = w.min(self.width.saturating_sub(x)) * 3;
            out.data[yy * w * 3..yy * w * 3 + len].copy_from_slice(&self.data[src..src + len]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.trim().to_lowercase())
    }

    /// Whether the pixel centered at `(u, v)` (in `[0, size)`) is inside.
    fn covers(self, u: f64, v: f64, size: f64) -> bool {
        let r = size / 2.0;
        let (dx, dy) = (u - r, v - r);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Triangle => dx.abs() <= 0.5 * v + 0.5,
            ShapeKind::Cross => dx.abs() <= size / 6.0 + 0.5 || dy.abs() <= size / 6.0 + 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorAnchor {
    pub name: String,
    pub rgb: [u8; 3],
}

pub fn default_colors() -> Vec<ColorAnchor> {
    [
        ("red", [220, 40, 40]),
        ("green", [40, 200, 60]),
        ("blue", [50, 90, 235]),
        ("yellow", [235, 215, 40]),
        ("magenta", [220, 50, 220]),
        ("cyan", [40, 215, 225]),
    ]
    .into_iter()
    .map(|(n, rgb)| ColorAnchor { name: n.to_string(), rgb })
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Eval,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Eval => "eval",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Partition::Train => 0,
            Partition::Eval => 0x5eed_0000_0000_0000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorAnchor>,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Inclusive range of object sides in pixels; draws are skewed small.
    pub object_size: (usize, usize),
    pub color_jitter: u8,
    pub noise: u8,
    pub clutter: usize,
    pub max_overlap_iou: f64,
    /// Class names withheld from the training partition.
    pub novel: Vec<String>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            shapes: ShapeKind::ALL.to_vec(),
            colors: default_colors(),
            objects: (5, 25),
            object_size: (4, 24),
            color_jitter: 20,
            noise: 6,
            clutter: 8,
            max_overlap_iou: 0.3,
            novel: Vec::new(),
            seed: 0,
        }
    }
}

/// One labeled object: class name and `[x, y, w, h]` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub class_name: String,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub record: AnnotationRecord,
}

impl SceneSpec {
    /// Every color/shape combination, colors outermost.
    pub fn class_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.colors.len() * self.shapes.len());
        for c in &self.colors {
            for s in &self.shapes {
                out.push(format!("{} {}", c.name, s.name()));
            }
        }
        out
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        self.validate()?;
        let novel: Vec<String> = self.novel.iter().map(|n| normalize_name(n)).collect();
        let entries: Vec<(String, ClassRole)> = self
            .class_names()
            .into_iter()
            .map(|n| {
                let role = if novel.contains(&n) { ClassRole::Novel } else { ClassRole::Base };
                (n, role)
            })
            .collect();
        ClassVocabulary::new(&entries)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Generation("shape and color sets must be non-empty".into()));
        }
        let (lo, hi) = self.object_size;
        if lo == 0 || lo > hi || hi > self.width.min(self.height) {
            return Err(Error::Generation(format!(
                "object size range {lo}..={hi} does not fit a {}x{} canvas",
                self.width, self.height
            )));
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::Generation("object count range is empty".into()));
        }
        let names = self.class_names();
        for n in &self.novel {
            if !names.contains(&normalize_name(n)) {
                return Err(Error::Generation(format!("novel class `{n}` is not a color/shape combination")));
            }
        }
        if self.novel.len() >= names.len() {
            return Err(Error::Generation("at least one class must stay base".into()));
        }
        Ok(())
    }
}

pub fn generate_scenes(spec: &SceneSpec, partition: Partition, count: usize) -> Result<Vec<Scene>> {
    spec.validate()?;
    (0..count).map(|i| generate_scene(spec, partition, i)).collect()
}

/// Scene `index` of a partition; seeded by `seed ⊕ index` so scenes can be
/// produced independently and in any order.
pub fn generate_scene(spec: &SceneSpec, partition: Partition, index: usize) -> Result<Scene> {
    let vocab = spec.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64 ^ partition.salt());
    let allowed: Vec<usize> = match partition {
        Partition::Train => vocab.indices_with_role(ClassRole::Base),
        Partition::Eval => (0..vocab.len()).collect(),
    };
    let novel = vocab.indices_with_role(ClassRole::Novel);

    let mut image = RgbImage::new(spec.width, spec.height);
    paint_background(&mut image, spec, &mut rng);

    let n_objects = rng.gen_range(spec.objects.0..=spec.objects.1);
    let mut placed: Vec<[f64; 4]> = Vec::with_capacity(n_objects);
    let mut objects = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let class = if partition == Partition::Eval && index == 0 && k == 0 && !novel.is_empty() {
            novel[rng.gen_range(0..novel.len())]
        } else {
            allowed[rng.gen_range(0..allowed.len())]
        };
        let (size, x, y) = place(spec, &placed, &mut rng).ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {} of scene {index} with IoU <= {} after {PLACEMENT_TRIES} tries",
                k + 1,
                spec.max_overlap_iou
            ))
        })?;
        placed.push([x as f64, y as f64, (x + size) as f64, (y + size) as f64]);
        let (ci, si) = (class / spec.shapes.len(), class % spec.shapes.len());
        let rgb = jitter(spec.colors[ci].rgb, spec.color_jitter, &mut rng);
        draw_shape(&mut image, spec.shapes[si], x, y, size, rgb);
        objects.push(ObjectAnnotation {
            class_name: vocab.name(class).to_string(),
            bbox: [x as f64, y as f64, size as f64, size as f64],
        });
    }
    Ok(Scene {
        image,
        record: AnnotationRecord {
            image_id: index as u64,
            file_name: format!("{}_{index:06}.png", partition.as_str()),
            width: spec.width,
            height: spec.height,
            objects,
        },
    })
}

const PLACEMENT_TRIES: usize = 200;

fn place(spec: &SceneSpec, placed: &[[f64; 4]], rng: &mut ChaCha8Rng) -> Option<(usize, usize, usize)> {
    let (lo, hi) = spec.object_size;
    for _ in 0..PLACEMENT_TRIES {
        let r: f64 = rng.gen();
        let size = lo + ((hi - lo + 1) as f64 * r * r) as usize;
        let size = size.min(hi);
        let x = rng.gen_range(0..=spec.width - size);
        let y = rng.gen_range(0..=spec.height - size);
        let b = [x as f64, y as f64, (x + size) as f64, (y + size) as f64];
        if placed.iter().all(|p| iou_xyxy(*p, b) <= spec.max_overlap_iou) {
            return Some((size, x, y));
        }
    }
    None
}

fn jitter(rgb: [u8; 3], amount: u8, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let a = amount as i32;
    rgb.map(|c| (c as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8)
}

fn paint_background(image: &mut RgbImage, spec: &SceneSpec, rng: &mut ChaCha8Rng) {
    let base: i32 = rng.gen_range(30..=80);
    let n = spec.noise as i32;
    for y in 0..image.height {
        for x in 0..image.width {
            let v = (base + rng.gen_range(-n..=n)).clamp(0, 255) as u8;
            image.put(x, y, [v, v, v]);
        }
    }
    for _ in 0..spec.clutter {
        let w = rng.gen_range(4..=(image.width / 4).max(4)).min(image.width);
        let h = rng.gen_range(4..=(image.height / 4).max(4)).min(image.height);
        let x0 = rng.gen_range(0..=image.width - w);
        let y0 = rng.gen_range(0..=image.height - h);
        let tint: [i32; 3] = [rng.gen_range(-25..=25), rng.gen_range(-25..=25), rng.gen_range(-25..=25)];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let px = image.pixel(x, y);
                let c = [0, 1, 2].map(|k| (px[k] as i32 + tint[k]).clamp(0, 255) as u8);
                image.put(x, y, c);
            }
        }
    }
}

fn draw_shape(image: &mut RgbImage, shape: ShapeKind, x0: usize, y0: usize, size: usize, rgb: [u8; 3]) {
    let s = size as f64;
    for v in 0..size {
        for u in 0..size {
            if shape.covers(u as f64 + 0.5, v as f64 + 0.5, s) {
                image.put(x0 + u, y0 + v, rgb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            objects: (1, 4),
            object_size: (8, 16),
            novel: vec!["red triangle".into()],
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_count_is_empty() {
        assert!(generate_scenes(&small_spec(), Partition::Train, 0).unwrap().is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_scenes(&small_spec(), Partition::Train, 5).unwrap();
        let b = generate_scenes(&small_spec(), Partition::Train, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn novel_classes_only_in_eval() {
        let spec = small_spec();
        let train = generate_scenes(&spec, Partition::Train, 200).unwrap();
        assert!(train
            .iter()
            .flat_map(|s| &s.record.objects)
            .all(|o| o.class_name != "red triangle"));
        let eval = generate_scenes(&spec, Partition::Eval, 3).unwrap();
        assert!(eval
            .iter()
            .flat_map(|s| &s.record.objects)
            .any(|o| o.class_name == "red triangle"));
    }

    #[test]
    fn objects_stay_inside_canvas() {
        for s in generate_scenes(&small_spec(), Partition::Eval, 50).unwrap() {
            for o in &s.record.objects {
                let [x, y, w, h] = o.bbox;
                assert!(x >= 0.0 && y >= 0.0 && x + w <= 64.0 && y + h <= 64.0);
            }
        }
    }

    #[test]
    fn infeasible_placement_names_the_constraint() {
        let spec = SceneSpec {
            width: 32,
            height: 32,
            objects: (30, 30),
            object_size: (16, 16),
            max_overlap_iou: 0.0,
            ..SceneSpec::default()
        };
        match generate_scenes(&spec, Partition::Train, 1) {
            Err(Error::Generation(msg)) => assert!(msg.contains("IoU")),
            other => panic!("expected a generation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let spec = SceneSpec {
            shapes: vec![],
            ..SceneSpec::default()
        };
        assert!(generate_scenes(&spec, Partition::Train, 1).is_err());
    }

    #[test]
    fn crop_pads_outside() {
        let mut img = RgbImage::new(4, 4);
        img.put(3, 3, [9, 9, 9]);
        let c = img.crop(2, 2, 4, 4);
        assert_eq!(c.pixel(1, 1), [9, 9, 9]);
        assert_eq!(c.pixel(3, 3), [0, 0, 0]);
    }
}
