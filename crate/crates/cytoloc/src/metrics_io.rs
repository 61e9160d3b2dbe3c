//! Evaluation outputs: `metrics.json` (full report), `metrics.csv` (one row
//! per image plus an aggregate row), and optional overlay PNGs showing
//! predicted object outlines against the annotated points.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use cytoloc_core::{
    binarize_and_clean, AnnotatedImage, BinaryMask, EvalConfig, MetricsReport, Network,
};

pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(dir.join("metrics.json"), json)?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record([
        "image_id",
        "precision",
        "recall",
        "f1",
        "rd_loc",
        "rd_count",
        "tp",
        "num_points",
        "num_objects",
        "count_estimate",
        "component_count",
    ])?;
    for m in &report.per_image {
        w.write_record([
            m.image_id.clone(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.rd_loc.to_string(),
            m.rd_count.to_string(),
            m.tp.to_string(),
            m.num_points.to_string(),
            m.num_objects.to_string(),
            m.count_estimate.to_string(),
            m.component_count.to_string(),
        ])?;
    }
    let a = &report.aggregate;
    w.write_record([
        "mean".to_string(),
        a.precision.to_string(),
        a.recall.to_string(),
        a.f1.to_string(),
        a.rd_loc.to_string(),
        a.rd_count.to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Renders one overlay per image into `dir/overlays/`: the image in
/// grayscale, predicted object boundaries in red, annotated points as green
/// crosses.
pub fn write_overlays(
    dir: &Path,
    network: &Network,
    images: &[AnnotatedImage],
    eval: &EvalConfig,
) -> Result<()> {
    let overlay_dir = dir.join("overlays");
    fs::create_dir_all(&overlay_dir)?;
    for image in images {
        let prediction = network
            .predict(image.pixels())
            .with_context(|| format!("predicting {}", image.id()))?;
        let mask = binarize_and_clean(&prediction.mask_probs, eval.threshold, eval.min_area);
        let overlay = render_overlay(image, &mask);
        overlay.save(overlay_dir.join(format!("{}.png", image.id())))?;
    }
    Ok(())
}

fn render_overlay(image: &AnnotatedImage, mask: &BinaryMask) -> RgbImage {
    let (h, w) = (image.pixels().height(), image.pixels().width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let mean = (0..3).map(|ch| image.pixels().at(ch, r, c)).sum::<f32>() / 3.0;
            let g = (mean * 255.0).round() as u8;
            out.put_pixel(c as u32, r as u32, Rgb([g, g, g]));
        }
    }
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 1 && is_boundary(mask, r, c) {
                out.put_pixel(c as u32, r as u32, Rgb([230, 40, 40]));
            }
        }
    }
    if let Some(points) = image.points() {
        for &(r, c) in points.points() {
            for (dr, dc) in [(0isize, 0isize), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (pr, pc) = (r as isize + dr, c as isize + dc);
                if pr >= 0 && pr < h as isize && pc >= 0 && pc < w as isize {
                    out.put_pixel(pc as u32, pr as u32, Rgb([40, 220, 40]));
                }
            }
        }
    }
    out
}

/// Foreground pixel with a background 4-neighbor (or on the image edge).
fn is_boundary(mask: &BinaryMask, r: usize, c: usize) -> bool {
    let (h, w) = (mask.height(), mask.width());
    if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
        return true;
    }
    mask.get(r - 1, c) == 0
        || mask.get(r + 1, c) == 0
        || mask.get(r, c - 1) == 0
        || mask.get(r, c + 1) == 0
}
