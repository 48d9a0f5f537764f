//! PNG overlays of ground truth and detections, and grouped-bar charts of
//! run comparisons.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;

use crate::bbox::BBox;
use crate::datasets::{tensor_to_rgb8, DatasetIndex};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::evaluation::Comparison;
use crate::sample::GtBox;
use crate::training::Model;

pub const GT_COLOR: Rgb<u8> = Rgb([40, 220, 60]);
pub const DETECTION_COLOR: Rgb<u8> = Rgb([235, 40, 40]);
const TEXT_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
const TEXT_SHADOW: Rgb<u8> = Rgb([0, 0, 0]);
/// Nearest-neighbour magnification applied before drawing.
pub const OVERLAY_SCALE: u32 = 4;

/// 3x5 glyphs, one row per byte (low three bits, left to right).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Draws `text` with its top-left corner at (x, y); unknown characters are
/// skipped. Each glyph has a one-pixel dark outline for legibility.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let Some(rows) = glyph(ch) else {
            cx += 4;
            continue;
        };
        for pass in 0..2 {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) == 0 {
                        continue;
                    }
                    let (px, py) = (cx + dx as i64, y + dy as i64);
                    if pass == 0 {
                        for (ox, oy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                            put(img, px + ox, py + oy, TEXT_SHADOW);
                        }
                    } else {
                        put(img, px, py, color);
                    }
                }
            }
        }
        cx += 4;
    }
}

pub fn draw_box(img: &mut RgbImage, b: &BBox, scale: f64, color: Rgb<u8>) {
    let x0 = (b.x * scale).round() as i64;
    let y0 = (b.y * scale).round() as i64;
    let x1 = (b.right() * scale).round() as i64 - 1;
    let y1 = (b.bottom() * scale).round() as i64 - 1;
    for x in x0..=x1 {
        put(img, x, y0, color);
        put(img, x, y1, color);
    }
    for y in y0..=y1 {
        put(img, x0, y, color);
        put(img, x1, y, color);
    }
}

/// Magnified image with ground truth in green and detections in red, each
/// detection labelled with its score.
pub fn render_overlay(base: &RgbImage, gt: &[GtBox], detections: &[Detection]) -> RgbImage {
    let scale = OVERLAY_SCALE;
    let mut img = image::imageops::resize(
        base,
        base.width() * scale,
        base.height() * scale,
        image::imageops::FilterType::Nearest,
    );
    let s = f64::from(scale);
    for g in gt {
        draw_box(&mut img, &g.bbox, s, GT_COLOR);
    }
    for d in detections {
        draw_box(&mut img, &d.bbox, s, DETECTION_COLOR);
    }
    for d in detections {
        let label = format!("{:.2}", d.score);
        let x = (d.bbox.x * s).round() as i64 + 1;
        let y = ((d.bbox.y * s).round() as i64 - 7).max(1);
        draw_text(&mut img, x, y, &label, TEXT_COLOR);
    }
    img
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlaySummary {
    pub written: Vec<PathBuf>,
    pub skipped: usize,
}

/// One `<sample id>.png` per loadable sample. Samples that fail to load
/// are skipped with a warning and counted.
pub fn render_overlays(model: &Model, dataset: &DatasetIndex, out_dir: &Path) -> Result<OverlaySummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &model.config;
    let mut summary = OverlaySummary::default();
    for i in 0..dataset.len() {
        let sample = match dataset.load_sample(i, cfg.image_size, cfg.channels) {
            Ok(s) => s,
            Err(e) => {
                warn!("skipping {}: {e}", dataset.entries[i].id);
                summary.skipped += 1;
                continue;
            }
        };
        let detections = model.detect(&sample.image)?;
        let img = render_overlay(&tensor_to_rgb8(&sample.image)?, &sample.boxes, &detections);
        let path = out_dir.join(format!("{}.png", sample.id));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        summary.written.push(path);
    }
    Ok(summary)
}

const METRIC_COLORS: [Rgb<u8>; 3] = [Rgb([66, 133, 244]), Rgb([251, 188, 5]), Rgb([52, 168, 83])];

/// Grouped bars: one group per run, one bar per metric (mAP50, mAP75,
/// mAP50:95). Values are printed in percent above each bar.
pub fn render_comparison_chart(cmp: &Comparison, path: &Path) -> Result<()> {
    let (bar_w, gap, margin, plot_h) = (16u32, 14u32, 12u32, 160u32);
    let groups = cmp.rows.len() as u32;
    let width = 2 * margin + groups * (3 * bar_w + gap);
    let height = plot_h + 2 * margin + 10;
    let mut img = RgbImage::from_pixel(width, height, Rgb([250, 250, 250]));
    let top = cmp
        .rows
        .iter()
        .flat_map(|r| [r.map50, r.map75, r.map50_95])
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let base_y = (margin + 10 + plot_h) as i64;
    for x in margin..width - margin {
        put(&mut img, x as i64, base_y, Rgb([60, 60, 60]));
    }
    for (gi, row) in cmp.rows.iter().enumerate() {
        let gx = margin + gi as u32 * (3 * bar_w + gap) + gap / 2;
        for (mi, v) in [row.map50, row.map75, row.map50_95].into_iter().enumerate() {
            let h = ((v / top) * f64::from(plot_h)).round() as i64;
            let x0 = i64::from(gx + mi as u32 * bar_w);
            for x in x0..x0 + i64::from(bar_w) - 2 {
                for y in base_y - h..base_y {
                    put(&mut img, x, y, METRIC_COLORS[mi]);
                }
            }
            draw_text(&mut img, x0, base_y - h - 7, &format!("{:.0}", 100.0 * v), TEXT_COLOR);
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_marks_both_kinds_of_boxes() {
        let base = RgbImage::from_pixel(16, 16, Rgb([100, 100, 100]));
        let gt = [GtBox {
            bbox: BBox::new(1.0, 1.0, 4.0, 4.0),
            category: 4,
        }];
        let det = [Detection {
            bbox: BBox::new(8.0, 8.0, 4.0, 4.0),
            category: 4,
            score: 0.5,
        }];
        let img = render_overlay(&base, &gt, &det);
        assert_eq!(img.dimensions(), (64, 64));
        assert_eq!(*img.get_pixel(4, 4), GT_COLOR);
        assert_eq!(*img.get_pixel(32, 40), DETECTION_COLOR);
        let only_gt = render_overlay(&base, &gt, &[]);
        assert_eq!(*only_gt.get_pixel(4, 4), GT_COLOR);
        assert_eq!(render_overlay(&base, &gt, &det), img);
    }
}
