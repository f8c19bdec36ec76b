//! Heatmap overlays as PNG files.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use steerhoi::attention::{CandidateAttention, Heatmap};
use steerhoi::geometry::BoundingBox;
use steerhoi::raster::Raster;

/// Output pixels per raster cell.
pub const CELL_SCALE: u32 = 8;

fn heat_colour(v: f64) -> [f64; 3] {
    // Black -> red -> yellow -> white.
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

fn draw_box(img: &mut RgbImage, b: &BoundingBox<f64>, px_per_unit: f64, colour: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let [x1, y1, x2, y2] = b.to_f64().map(|v| (v * px_per_unit).round() as i64);
    let clamp = |v: i64, hi: i64| v.clamp(0, hi - 1) as u32;
    for x in x1..=x2 {
        img.put_pixel(clamp(x, w), clamp(y1, h), colour);
        img.put_pixel(clamp(x, w), clamp(y2, h), colour);
    }
    for y in y1..=y2 {
        img.put_pixel(clamp(x1, w), clamp(y, h), colour);
        img.put_pixel(clamp(x2, w), clamp(y, h), colour);
    }
}

/// Half raster, half heat colour, with the human box in blue and the
/// object box in green.
pub fn overlay(raster: &Raster, map: &Heatmap, boxes: Option<(&BoundingBox<f64>, &BoundingBox<f64>)>) -> RgbImage {
    let (rows, cols) = (raster.cells_h() as u32, raster.cells_w() as u32);
    let mut img = RgbImage::new(cols * CELL_SCALE, rows * CELL_SCALE);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (r, c) = ((y / CELL_SCALE) as usize, (x / CELL_SCALE) as usize);
        let base = raster.pixel(r, c);
        let heat = heat_colour(map.get(r, c));
        let mix = |i: usize| ((0.4 * base[i] + 0.6 * heat[i]).clamp(0.0, 1.0) * 255.0).round() as u8;
        *p = Rgb([mix(0), mix(1), mix(2)]);
    }
    if let Some((h, o)) = boxes {
        let scale = CELL_SCALE as f64 / raster.cell_px();
        draw_box(&mut img, h, scale, Rgb([60, 120, 255]));
        draw_box(&mut img, o, scale, Rgb([60, 220, 90]));
    }
    img
}

/// Writes `<stem>_<k>_encoder.png` and `<stem>_<k>_conditioned.png` per
/// candidate; returns the paths in order.
pub fn write_attention(
    raster: &Raster,
    maps: &[CandidateAttention<f64>],
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (k, a) in maps.iter().enumerate() {
        let boxes = Some((&a.human_box, &a.object_box));
        for (tag, map) in [("encoder", &a.unconditioned), ("conditioned", &a.conditioned)] {
            let path = dir.join(format!("{stem}_{k}_{tag}.png"));
            overlay(raster, map, boxes).save(&path).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    }
    Ok(written)
}
