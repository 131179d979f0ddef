//! Fixed-size tiling of large images with annotation clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scene::{ObjectAnnotation, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileSpec {
    pub tile: usize,
    pub stride: usize,
    /// Clipped boxes keep at least this fraction of their area or are dropped.
    pub min_visible: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            tile: 800,
            stride: 800,
            min_visible: 0.4,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.stride == 0 || self.stride > self.tile {
            return Err(Error::Contract(format!(
                "tile spec needs 0 < stride <= tile, got stride {} tile {}",
                self.stride, self.tile
            )));
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return Err(Error::Contract(format!("min visible fraction {} outside [0, 1]", self.min_visible)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub image: RgbImage,
    /// `(x, y)` of the tile's top-left corner in the source image.
    pub offset: (usize, usize),
    pub objects: Vec<ObjectAnnotation>,
}

/// Start positions along one axis: multiples of `stride`, the last one
/// pulled back so the tile ends at `len`. A side shorter than the tile gets
/// a single tile at 0.
pub fn tile_offsets(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return alloc::vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile < len {
        out.push(o);
        o += stride;
    }
    let last = len - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Intersects a pixel `[x, y, w, h]` box with the `w × h` window at `(ox, oy)`;
/// `None` if nothing is left.
pub fn clip_xywh(b: [f64; 4], ox: f64, oy: f64, w: f64, h: f64) -> Option<[f64; 4]> {
    let x1 = b[0].max(ox);
    let y1 = b[1].max(oy);
    let x2 = (b[0] + b[2]).min(ox + w);
    let y2 = (b[1] + b[3]).min(oy + h);
    if x2 > x1 && y2 > y1 {
        Some([x1, y1, x2 - x1, y2 - y1])
    } else {
        None
    }
}

/// Tiles in row-major order (top row first). Images smaller than a tile are
/// padded with black.
pub fn tile_image(image: &RgbImage, objects: &[ObjectAnnotation], spec: &TileSpec) -> Result<Vec<Tile>> {
    spec.validate()?;
    let xs = tile_offsets(image.width, spec.tile, spec.stride);
    let ys = tile_offsets(image.height, spec.tile, spec.stride);
    let t = spec.tile as f64;
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let kept = objects
                .iter()
                .filter_map(|o| {
                    let area = o.bbox[2] * o.bbox[3];
                    let c = clip_xywh(o.bbox, x as f64, y as f64, t, t)?;
                    (c[2] * c[3] >= spec.min_visible * area).then(|| ObjectAnnotation {
                        class_name: o.class_name.clone(),
                        bbox: [c[0] - x as f64, c[1] - y as f64, c[2], c[3]],
                    })
                })
                .collect();
            tiles.push(Tile {
                image: image.crop(x, y, spec.tile, spec.tile),
                offset: (x, y),
                objects: kept,
            });
        }
    }
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn last_offset_shifts_inward() {
        assert_eq!(tile_offsets(1000, 800, 800), [0, 200]);
        assert_eq!(tile_offsets(1600, 800, 800), [0, 800]);
        assert_eq!(tile_offsets(500, 800, 800), [0]);
        assert_eq!(tile_offsets(1000, 400, 300), [0, 300, 600]);
    }

    #[test]
    fn small_image_is_padded() {
        let img = RgbImage::new(10, 20);
        let tiles = tile_image(&img, &[], &TileSpec { tile: 32, stride: 32, min_visible: 0.4 }).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].image.width, tiles[0].image.height), (32, 32));
    }

    #[test]
    fn sliver_is_dropped() {
        let img = RgbImage::new(64, 32);
        let obj = ObjectAnnotation {
            class_name: "a".to_string(),
            bbox: [29.0, 0.0, 10.0, 10.0],
        };
        let tiles = tile_image(&img, &[obj], &TileSpec { tile: 32, stride: 32, min_visible: 0.4 }).unwrap();
        assert!(tiles[0].objects.is_empty());
        assert_eq!(tiles[1].objects[0].bbox, [0.0, 0.0, 7.0, 10.0]);
    }

    #[test]
    fn bad_stride_rejected() {
        assert!(TileSpec { tile: 8, stride: 9, min_visible: 0.4 }.validate().is_err());
        assert!(TileSpec { tile: 8, stride: 0, min_visible: 0.4 }.validate().is_err());
    }
}
