//! Deterministic synthetic microscopy stand-in: bright elliptical blobs on a
//! textured background, with exact point ground truth and a noisy "eyeballed"
//! count per image.
//!
//! Blob placement draws from one stream and eyeball noise from another, so
//! two configs differing only in `eyeball_noise` produce pixel-identical
//! images with different approximate counts.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, DataError, PointSet, DIM_MULTIPLE};
use crate::rng::{
    self, uniform_range_f64, uniform_u32_inclusive, uniform_usize, STREAM_EYEBALL, STREAM_SYNTH,
};
use crate::tensor::Tensor;

/// Per-blob placement attempts before giving up on an image.
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("image dimensions {height}x{width} must be nonzero and divisible by {DIM_MULTIPLE}")]
    BadDims { height: usize, width: usize },
    #[error("cell count range [{min}, {max}] must satisfy 1 <= min <= max")]
    BadCountRange { min: u32, max: u32 },
    #[error("cell radius range [{min}, {max}] must satisfy 1 <= min <= max (finite)")]
    BadRadiusRange { min: f64, max: f64 },
    #[error("eyeball noise level must be finite and non-negative, got {delta}")]
    BadNoise { delta: f64 },
    #[error("at least one image must be requested")]
    NoImages,
    #[error(
        "could not place blob {placed} of {requested} in image {image_index}: \
         too many cells for the area (reduce counts or radii)"
    )]
    PackingFailed {
        image_index: usize,
        placed: usize,
        requested: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Generator settings. Cell radii are major semi-axes in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub count_min: u32,
    pub count_max: u32,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Margin added on top of the sum of two blobs' radii when enforcing
    /// center separation. Larger values make objects easier to tell apart at
    /// matching time.
    pub extra_spacing: f64,
    /// Relative eyeballing error bound: the approximate count is
    /// `max(1, round(N * (1 + e)))` with `e` uniform in `[-delta, +delta]`.
    pub eyeball_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 8,
            height: 64,
            width: 64,
            count_min: 10,
            count_max: 40,
            radius_min: 2.0,
            radius_max: 3.0,
            extra_spacing: 2.0,
            eyeball_noise: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_images == 0 {
            return Err(SynthError::NoImages);
        }
        if self.height == 0
            || self.width == 0
            || self.height % DIM_MULTIPLE != 0
            || self.width % DIM_MULTIPLE != 0
        {
            return Err(SynthError::BadDims {
                height: self.height,
                width: self.width,
            });
        }
        if self.count_min == 0 || self.count_min > self.count_max {
            return Err(SynthError::BadCountRange {
                min: self.count_min,
                max: self.count_max,
            });
        }
        let r_ok = self.radius_min.is_finite()
            && self.radius_max.is_finite()
            && self.radius_min >= 1.0
            && self.radius_min <= self.radius_max
            && self.extra_spacing.is_finite()
            && self.extra_spacing >= 0.0;
        if !r_ok {
            return Err(SynthError::BadRadiusRange {
                min: self.radius_min,
                max: self.radius_max,
            });
        }
        if !self.eyeball_noise.is_finite() || self.eyeball_noise < 0.0 {
            return Err(SynthError::BadNoise {
                delta: self.eyeball_noise,
            });
        }
        Ok(())
    }
}

struct Blob {
    row: usize,
    col: usize,
    /// Major and minor semi-axes.
    a: f64,
    b: f64,
    /// Rotation of the major axis, radians.
    theta: f64,
    peak: f32,
}

/// Generates `config.num_images` point-annotated images. Every image also
/// records its eyeballed count so experiments can demote it to count-only
/// supervision. Fully deterministic given `(config, seed)`.
pub fn synthesize_dataset(
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<AnnotatedImage>, SynthError> {
    config.validate()?;
    let mut gen = rng::stream(seed, STREAM_SYNTH);
    let mut eye = rng::stream(seed, STREAM_EYEBALL);
    let mut images = Vec::with_capacity(config.num_images);
    for index in 0..config.num_images {
        let n = uniform_u32_inclusive(&mut gen, config.count_min, config.count_max) as usize;
        let blobs = place_blobs(&mut gen, config, index, n)?;
        let pixels = render(&mut gen, config, &blobs);
        let points = PointSet::new(
            blobs.iter().map(|b| (b.row, b.col)).collect(),
            config.height,
            config.width,
        )?;
        let noise = uniform_range_f64(&mut eye, -config.eyeball_noise, config.eyeball_noise);
        let eyeball = libm::round(n as f64 * (1.0 + noise)).max(1.0) as u32;
        images.push(AnnotatedImage::strong(
            alloc::format!("synth_{index:04}"),
            pixels,
            points,
            Some(eyeball),
        )?);
    }
    Ok(images)
}

fn place_blobs(
    gen: &mut ChaCha8Rng,
    config: &SynthConfig,
    image_index: usize,
    n: usize,
) -> Result<Vec<Blob>, SynthError> {
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = uniform_range_f64(gen, config.radius_min, config.radius_max);
            let b = a * uniform_range_f64(gen, 0.65, 1.0);
            let theta = uniform_range_f64(gen, 0.0, core::f64::consts::PI);
            let margin = libm::ceil(a) as usize + 1;
            if config.height <= 2 * margin || config.width <= 2 * margin {
                continue;
            }
            let row = margin + uniform_usize(gen, config.height - 2 * margin);
            let col = margin + uniform_usize(gen, config.width - 2 * margin);
            let clear = blobs.iter().all(|other| {
                let dr = row as f64 - other.row as f64;
                let dc = col as f64 - other.col as f64;
                let dist = libm::sqrt(dr * dr + dc * dc);
                dist >= a + other.a + config.extra_spacing
            });
            if clear {
                let peak = uniform_range_f64(gen, 0.75, 0.95) as f32;
                blobs.push(Blob {
                    row,
                    col,
                    a,
                    b,
                    theta,
                    peak,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::PackingFailed {
                image_index,
                placed: k,
                requested: n,
            });
        }
    }
    Ok(blobs)
}

fn render(gen: &mut ChaCha8Rng, config: &SynthConfig, blobs: &[Blob]) -> Tensor {
    let (h, w) = (config.height, config.width);
    // Low-frequency background: bilinear interpolation of a coarse grid,
    // plus fine per-pixel noise, around a per-image base tone.
    let base = uniform_range_f64(gen, 0.15, 0.35) as f32;
    const GRID: usize = 4;
    let mut grid = [[0.0f32; GRID + 1]; GRID + 1];
    for row in grid.iter_mut() {
        for v in row.iter_mut() {
            *v = uniform_range_f64(gen, -1.0, 1.0) as f32;
        }
    }
    let mut luma = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gr = r as f32 / h as f32 * GRID as f32;
            let gc = c as f32 / w as f32 * GRID as f32;
            let (r0, c0) = (gr as usize, gc as usize);
            let (fr, fc) = (gr - r0 as f32, gc - c0 as f32);
            let coarse = grid[r0][c0] * (1.0 - fr) * (1.0 - fc)
                + grid[r0 + 1][c0] * fr * (1.0 - fc)
                + grid[r0][c0 + 1] * (1.0 - fr) * fc
                + grid[r0 + 1][c0 + 1] * fr * fc;
            let fine = uniform_range_f64(gen, -1.0, 1.0) as f32;
            luma.push(base + 0.06 * coarse + 0.03 * fine);
        }
    }

    for blob in blobs {
        let (sin_t, cos_t) = (libm::sin(blob.theta), libm::cos(blob.theta));
        let reach = libm::ceil(blob.a) as isize + 1;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let r = blob.row as isize + dr;
                let c = blob.col as isize + dc;
                if r < 0 || r >= h as isize || c < 0 || c >= w as isize {
                    continue;
                }
                let u = cos_t * dr as f64 + sin_t * dc as f64;
                let v = -sin_t * dr as f64 + cos_t * dc as f64;
                let d2 = (u / blob.a) * (u / blob.a) + (v / blob.b) * (v / blob.b);
                if d2 > 1.0 {
                    continue;
                }
                // Soft radial falloff from the peak to the background.
                let f = libm::sqrt(1.0 - d2) as f32;
                let idx = r as usize * w + c as usize;
                let lit = luma[idx] + (blob.peak - luma[idx]) * f;
                luma[idx] = luma[idx].max(lit);
            }
        }
    }

    // Slight per-channel tinting around the shared luminance.
    let tint = [
        uniform_range_f64(gen, 0.92, 1.0) as f32,
        uniform_range_f64(gen, 0.82, 0.92) as f32,
        uniform_range_f64(gen, 0.88, 0.98) as f32,
    ];
    let mut pixels = Tensor::zeros(3, h, w);
    for (ch, &t) in tint.iter().enumerate() {
        let plane = pixels.plane_mut(ch);
        for (out, &l) in plane.iter_mut().zip(&luma) {
            *out = (l * t).clamp(0.0, 1.0);
        }
    }
    pixels
}
