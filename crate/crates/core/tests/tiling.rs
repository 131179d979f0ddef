use ovd_core::scene::{ObjectAnnotation, RgbImage};
use ovd_core::tiling::{tile_image, TileSpec};
use proptest::prelude::*;

fn obj(bbox: [f64; 4]) -> ObjectAnnotation {
    ObjectAnnotation { class_name: "red ring".into(), bbox }
}

#[test]
fn four_tiles_on_a_1600_square() {
    let img = RgbImage::new(1600, 1600);
    let tiles = tile_image(&img, &[], &TileSpec::default()).unwrap();
    let offsets: Vec<_> = tiles.iter().map(|t| t.offset).collect();
    assert_eq!(offsets, [(0, 0), (800, 0), (0, 800), (800, 800)]);
    assert!(tiles.iter().all(|t| (t.image.width, t.image.height) == (800, 800)));
}

#[test]
fn box_inside_one_tile_is_unchanged() {
    let img = RgbImage::new(1600, 1600);
    let tiles = tile_image(&img, &[obj([900.0, 100.0, 30.0, 20.0])], &TileSpec::default()).unwrap();
    let hits: Vec<_> = tiles.iter().filter(|t| !t.objects.is_empty()).collect();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].offset, (800, 0));
    assert_eq!(hits[0].objects[0].bbox, [100.0, 100.0, 30.0, 20.0]);
}

#[test]
fn straddling_box_kept_in_both_halves() {
    let img = RgbImage::new(1600, 1600);
    let tiles = tile_image(&img, &[obj([780.0, 100.0, 40.0, 20.0])], &TileSpec::default()).unwrap();
    assert_eq!(tiles[0].objects[0].bbox, [780.0, 100.0, 20.0, 20.0]);
    assert_eq!(tiles[1].objects[0].bbox, [0.0, 100.0, 20.0, 20.0]);
    assert!(tiles[2].objects.is_empty() && tiles[3].objects.is_empty());
}

#[test]
fn ragged_edge_shifts_inward() {
    let img = RgbImage::new(1000, 700);
    let tiles = tile_image(&img, &[], &TileSpec::default()).unwrap();
    let offsets: Vec<_> = tiles.iter().map(|t| t.offset).collect();
    assert_eq!(offsets, [(0, 0), (200, 0)]);
}

proptest! {
    #[test]
    fn kept_boxes_map_back_inside_the_original(
        w in 40usize..200, h in 40usize..200, tile in 16usize..64, overlap in 0usize..8,
        x in 0.0f64..150.0, y in 0.0f64..150.0, bw in 1.0f64..60.0, bh in 1.0f64..60.0,
    ) {
        let stride = tile - overlap.min(tile - 1);
        let spec = TileSpec { tile, stride, min_visible: 0.4 };
        let b = [x, y, bw, bh];
        let tiles = tile_image(&RgbImage::new(w, h), &[obj(b)], &spec).unwrap();
        for t in &tiles {
            for o in &t.objects {
                let (ox, oy) = (t.offset.0 as f64, t.offset.1 as f64);
                let m = [o.bbox[0] + ox, o.bbox[1] + oy, o.bbox[2], o.bbox[3]];
                prop_assert!(m[0] >= b[0] - 1e-9 && m[1] >= b[1] - 1e-9);
                prop_assert!(m[0] + m[2] <= b[0] + b[2] + 1e-9 && m[1] + m[3] <= b[1] + b[3] + 1e-9);
                prop_assert!(o.bbox[2] * o.bbox[3] >= 0.4 * bw * bh - 1e-9);
            }
        }
    }
}
