//! Dataset directories on disk.
//!
//! Layout:
//!
//! ```text
//! <root>/manifest.csv          id,count,count_source,split_hint
//! <root>/images/<id>.png       8-bit RGB
//! <root>/points/<id>.csv       header `row,col`, one annotation per line
//! ```
//!
//! A manifest row with a points file becomes a point-annotated (D1) image;
//! its `count` column, when present with `count_source=eyeballed`, records
//! the approximate count used if an experiment later demotes the image to
//! count-only supervision. A row without points needs an eyeballed count of
//! at least 1. The optional `split_hint` column pins images to `train`,
//! `val`, or `test`; unhinted images are assigned by seeded fractions at
//! experiment time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use cytoloc_core::{AnnotatedImage, CountSource, PointSet, SupervisionLevel, Tensor};

/// Spatial multiple the network requires (four 2x2 poolings).
const DIM_MULTIPLE: usize = 16;

const SOURCE_EXACT: &str = "exact_from_points";
const SOURCE_EYEBALLED: &str = "eyeballed";

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Center-crop images whose dimensions are not divisible by 16 instead
    /// of rejecting them; point annotations are shifted into the crop and
    /// annotations falling outside it are dropped.
    pub center_crop: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    count: Option<u32>,
    count_source: String,
    split_hint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    row: usize,
    col: usize,
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

fn points_path(root: &Path, id: &str) -> PathBuf {
    root.join("points").join(format!("{id}.csv"))
}

/// Writes a dataset directory. `hints` assigns `split_hint` values; ids
/// without an entry get an empty hint. Pixels are quantized to 8 bits.
pub fn save_dataset(
    root: &Path,
    images: &[AnnotatedImage],
    hints: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("points"))?;

    let mut manifest = csv::Writer::from_path(root.join("manifest.csv"))?;
    let mut ordered: Vec<&AnnotatedImage> = images.iter().collect();
    ordered.sort_by(|a, b| a.id().cmp(b.id()));

    for image in ordered {
        let id = image.id();
        save_png(&image_path(root, id), image.pixels())
            .with_context(|| format!("writing image {id}"))?;

        let (count, count_source) = match image.level() {
            SupervisionLevel::D1 => match image.recorded_eyeball() {
                Some(eye) => (Some(eye), SOURCE_EYEBALLED),
                None => (None, ""),
            },
            SupervisionLevel::D2 => (Some(image.count().value()), SOURCE_EYEBALLED),
        };
        if let Some(points) = image.points() {
            let mut w = csv::Writer::from_path(points_path(root, id))?;
            for &(row, col) in points.points() {
                w.serialize(PointRow { row, col })?;
            }
            w.flush()?;
        }
        manifest.serialize(ManifestRow {
            id: id.to_string(),
            count,
            count_source: count_source.to_string(),
            split_hint: hints.get(id).cloned().unwrap_or_default(),
        })?;
    }
    manifest.flush()?;
    Ok(())
}

/// Reads a dataset directory back into memory, returning the images in
/// manifest order plus the non-empty split hints.
pub fn load_dataset(
    root: &Path,
    opts: &LoadOptions,
) -> Result<(Vec<AnnotatedImage>, BTreeMap<String, String>)> {
    let manifest_path = root.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest_path)
        .with_context(|| format!("opening {}", manifest_path.display()))?;

    let mut images = Vec::new();
    let mut hints = BTreeMap::new();
    let mut seen = BTreeMap::new();
    for (index, record) in reader.deserialize().enumerate() {
        let row: ManifestRow =
            record.with_context(|| format!("manifest row {}", index + 2))?;
        if seen.insert(row.id.clone(), ()).is_some() {
            bail!("manifest lists id `{}` twice", row.id);
        }
        let image = load_one(root, &row, opts)
            .with_context(|| format!("loading image `{}`", row.id))?;
        if !row.split_hint.is_empty() {
            hints.insert(row.id.clone(), normalize_hint(&row.split_hint)?);
        }
        images.push(image);
    }
    Ok((images, hints))
}

fn normalize_hint(hint: &str) -> Result<String> {
    match hint {
        "train" => Ok("train".into()),
        "val" | "validation" => Ok("val".into()),
        "test" => Ok("test".into()),
        other => bail!("split_hint `{other}` is not one of train, val, test"),
    }
}

fn load_one(root: &Path, row: &ManifestRow, opts: &LoadOptions) -> Result<AnnotatedImage> {
    let png = image_path(root, &row.id);
    if !png.is_file() {
        bail!("missing image file {}", png.display());
    }
    let mut pixels = load_png(&png)?;

    let points_file = points_path(root, &row.id);
    let mut points = if points_file.is_file() {
        Some(read_points(&points_file)?)
    } else {
        None
    };

    let (h, w) = (pixels.height(), pixels.width());
    if h % DIM_MULTIPLE != 0 || w % DIM_MULTIPLE != 0 {
        let (ch, cw) = (h - h % DIM_MULTIPLE, w - w % DIM_MULTIPLE);
        if !opts.center_crop {
            bail!(
                "image is {h}x{w}, not divisible by {DIM_MULTIPLE}; \
                 pass --center-crop to crop it centrally to {ch}x{cw}"
            );
        }
        if ch == 0 || cw == 0 {
            bail!("image is {h}x{w}, too small to crop to a multiple of {DIM_MULTIPLE}");
        }
        let (top, left) = ((h - ch) / 2, (w - cw) / 2);
        pixels = crop(&pixels, top, left, ch, cw);
        points = points
            .map(|p| crop_points(&p, top, left, ch, cw))
            .transpose()?;
    }

    match (points, row.count) {
        (Some(points), count) => {
            let recorded_eyeball = match (count, row.count_source.as_str()) {
                (Some(eye), SOURCE_EYEBALLED) => Some(eye),
                (Some(n), "" | SOURCE_EXACT) => {
                    if n as usize != points.len() {
                        bail!(
                            "manifest count {n} disagrees with {} annotated points",
                            points.len()
                        );
                    }
                    None
                }
                (Some(_), other) => bail!("unknown count_source `{other}`"),
                (None, _) => None,
            };
            let pixels_h = pixels.height();
            let pixels_w = pixels.width();
            let points = PointSet::new(points.points().to_vec(), pixels_h, pixels_w)?;
            Ok(AnnotatedImage::strong(
                row.id.clone(),
                pixels,
                points,
                recorded_eyeball,
            )?)
        }
        (None, Some(count)) => {
            if row.count_source == SOURCE_EXACT {
                bail!("count_source `{SOURCE_EXACT}` requires a points file");
            }
            Ok(AnnotatedImage::weak(row.id.clone(), pixels, count)?)
        }
        (None, None) => bail!("row has neither a points file nor a count"),
    }
}

fn read_points(path: &Path) -> Result<PointSet> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut points = Vec::new();
    let mut max_row = 0usize;
    let mut max_col = 0usize;
    for (index, record) in reader.deserialize().enumerate() {
        let p: PointRow = record.with_context(|| {
            format!("malformed point row {} in {}", index + 2, path.display())
        })?;
        max_row = max_row.max(p.row);
        max_col = max_col.max(p.col);
        points.push((p.row, p.col));
    }
    // Bounds are validated again against the real image dimensions when the
    // annotated image is assembled.
    Ok(PointSet::new(points, max_row + 1, max_col + 1)?)
}

fn crop(pixels: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(pixels.channels(), h, w);
    for c in 0..pixels.channels() {
        for r in 0..h {
            for col in 0..w {
                out.set(c, r, col, pixels.at(c, r + top, col + left));
            }
        }
    }
    out
}

fn crop_points(points: &PointSet, top: usize, left: usize, h: usize, w: usize) -> Result<PointSet> {
    let kept: Vec<(usize, usize)> = points
        .points()
        .iter()
        .filter(|&&(r, c)| r >= top && r < top + h && c >= left && c < left + w)
        .map(|&(r, c)| (r - top, c - left))
        .collect();
    if kept.is_empty() {
        bail!("center crop removed every point annotation");
    }
    Ok(PointSet::new(kept, h, w)?)
}

fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    let (h, w) = (pixels.height(), pixels.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = std::array::from_fn(|ch| (pixels.at(ch, r, c) * 255.0).round() as u8);
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor::zeros(3, h, w);
    for r in 0..h {
        for c in 0..w {
            let px = img.get_pixel(c as u32, r as u32);
            for ch in 0..3 {
                out.set(ch, r, c, px.0[ch] as f32 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Loads `count_source` semantics for reporting; mirrors the manifest words.
pub fn source_name(source: CountSource) -> &'static str {
    match source {
        CountSource::ExactFromPoints => SOURCE_EXACT,
        CountSource::Eyeballed => SOURCE_EYEBALLED,
    }
}
