//! Dataset types: point annotations, cell counts, supervision levels,
//! ground-truth mask generation, and the p-percent training partition.
//!
//! Supervision comes in two levels. A `D1` image carries point annotations,
//! from which both a dilated ground-truth mask and an exact cell count are
//! derived. A `D2` image carries only an approximate count produced by
//! eyeballing. The partition between the two is what the mixed-supervision
//! experiments sweep.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::{self, STREAM_PARTITION};
use crate::tensor::{BinaryMask, Tensor};

/// Encoder downsampling factor; image sides must be divisible by this.
pub const DIM_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataError {
    #[error("point ({row}, {col}) lies outside the {height}x{width} image")]
    PointOutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("duplicate point ({row}, {col})")]
    DuplicatePoint { row: usize, col: usize },
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("dilation radius must be at least 1")]
    ZeroRadius,
    #[error("cell count must be at least 1")]
    ZeroCount,
    #[error("image dimensions {height}x{width} are not divisible by {DIM_MULTIPLE}")]
    DimsNotDivisible { height: usize, width: usize },
    #[error("expected a 3-channel image, got {channels} channels")]
    BadChannelCount { channels: usize },
    #[error("pixel values must be finite and within [0, 1]")]
    BadPixelRange,
    #[error("point annotations have size {points_h}x{points_w} but image is {image_h}x{image_w}")]
    PointImageMismatch {
        points_h: usize,
        points_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("image '{id}' has no recorded eyeballed count to demote to")]
    NoEyeballCount { id: String },
    #[error("partition percentage {p} exceeds 100")]
    BadPercentage { p: u8 },
    #[error("dataset split lists are not pairwise disjoint (id '{id}')")]
    SplitOverlap { id: String },
    #[error("train_d1 has {actual} ids but p={p}% of {total} requires {expected}")]
    SplitSizeMismatch {
        p: u8,
        total: usize,
        expected: usize,
        actual: usize,
    },
}

/// Point annotations for one image: one `(row, col)` pixel per cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<(usize, usize)>,
    image_height: usize,
    image_width: usize,
}

impl PointSet {
    /// Validates bounds and uniqueness; the offending point is named in the error.
    pub fn new(
        points: Vec<(usize, usize)>,
        image_height: usize,
        image_width: usize,
    ) -> Result<Self, DataError> {
        for &(row, col) in &points {
            if row >= image_height || col >= image_width {
                return Err(DataError::PointOutOfBounds {
                    row,
                    col,
                    height: image_height,
                    width: image_width,
                });
            }
        }
        let mut seen = points.clone();
        seen.sort_unstable();
        for pair in seen.windows(2) {
            if pair[0] == pair[1] {
                return Err(DataError::DuplicatePoint {
                    row: pair[0].0,
                    col: pair[0].1,
                });
            }
        }
        Ok(Self {
            points,
            image_height,
            image_width,
        })
    }

    #[inline]
    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn image_height(&self) -> usize {
        self.image_height
    }

    #[inline]
    pub fn image_width(&self) -> usize {
        self.image_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountSource {
    ExactFromPoints,
    Eyeballed,
}

/// A per-image cell count; the loss normalizes by it, so zero is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    value: u32,
    source: CountSource,
}

impl CellCount {
    pub fn new(value: u32, source: CountSource) -> Result<Self, DataError> {
        if value == 0 {
            return Err(DataError::ZeroCount);
        }
        Ok(Self { value, source })
    }

    #[inline]
    pub fn value(&self) -> u32 {
        self.value
    }

    #[inline]
    pub fn source(&self) -> CountSource {
        self.source
    }
}

/// Exact count derived from point annotations.
pub fn count_from_points(points: &PointSet) -> Result<CellCount, DataError> {
    if points.is_empty() {
        return Err(DataError::EmptyPointSet);
    }
    CellCount::new(points.len() as u32, CountSource::ExactFromPoints)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupervisionLevel {
    /// Points plus the exact count derived from them.
    D1,
    /// Approximate (eyeballed) count only.
    D2,
}

impl core::fmt::Display for SupervisionLevel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SupervisionLevel::D1 => write!(f, "D1"),
            SupervisionLevel::D2 => write!(f, "D2"),
        }
    }
}

/// Binary supervision target produced by dilating point annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub mask: BinaryMask,
    pub dilation_radius: usize,
}

/// Dilates each point with an inclusive Euclidean disk: pixel `(r, c)` is
/// foreground iff some point `(pr, pc)` satisfies
/// `(r-pr)^2 + (c-pc)^2 <= radius^2`. Disks of nearby points may merge.
pub fn generate_mask(points: &PointSet, radius: usize) -> Result<GroundTruthMask, DataError> {
    if radius == 0 {
        return Err(DataError::ZeroRadius);
    }
    if points.is_empty() {
        return Err(DataError::EmptyPointSet);
    }
    let (h, w) = (points.image_height(), points.image_width());
    let mut mask = BinaryMask::zeros(h, w);
    let r = radius as isize;
    let r_sq = r * r;
    for &(pr, pc) in points.points() {
        for dr in -r..=r {
            let row = pr as isize + dr;
            if row < 0 || row >= h as isize {
                continue;
            }
            for dc in -r..=r {
                if dr * dr + dc * dc > r_sq {
                    continue;
                }
                let col = pc as isize + dc;
                if col < 0 || col >= w as isize {
                    continue;
                }
                mask.set(row as usize, col as usize, 1);
            }
        }
    }
    Ok(GroundTruthMask {
        mask,
        dilation_radius: radius,
    })
}

/// One training/validation/test image together with whatever ground truth it
/// carries. Constructors enforce the level invariants.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    image_id: String,
    pixels: Tensor,
    points: Option<PointSet>,
    count: CellCount,
    level: SupervisionLevel,
    /// Eyeballed count recorded alongside point annotations, kept so a D1
    /// image can later be demoted to D2 by an experiment partition.
    recorded_eyeball: Option<u32>,
}

impl AnnotatedImage {
    /// A strongly annotated (D1) image: points present, count derived from them.
    pub fn strong(
        image_id: String,
        pixels: Tensor,
        points: PointSet,
        recorded_eyeball: Option<u32>,
    ) -> Result<Self, DataError> {
        validate_pixels(&pixels)?;
        if points.image_height() != pixels.height() || points.image_width() != pixels.width() {
            return Err(DataError::PointImageMismatch {
                points_h: points.image_height(),
                points_w: points.image_width(),
                image_h: pixels.height(),
                image_w: pixels.width(),
            });
        }
        let count = count_from_points(&points)?;
        Ok(Self {
            image_id,
            pixels,
            points: Some(points),
            count,
            level: SupervisionLevel::D1,
            recorded_eyeball,
        })
    }

    /// A weakly annotated (D2) image: eyeballed count only, no points.
    pub fn weak(image_id: String, pixels: Tensor, eyeball_count: u32) -> Result<Self, DataError> {
        validate_pixels(&pixels)?;
        let count = CellCount::new(eyeball_count, CountSource::Eyeballed)?;
        Ok(Self {
            image_id,
            pixels,
            points: None,
            count,
            level: SupervisionLevel::D2,
            recorded_eyeball: Some(eyeball_count),
        })
    }

    /// Drops the points and switches to the recorded eyeballed count,
    /// producing the D2 view of this image.
    pub fn demote(&self) -> Result<Self, DataError> {
        let eyeball = self
            .recorded_eyeball
            .ok_or_else(|| DataError::NoEyeballCount {
                id: self.image_id.clone(),
            })?;
        AnnotatedImage::weak(self.image_id.clone(), self.pixels.clone(), eyeball)
    }

    #[inline]
    pub fn id(&self) -> &str {
        &self.image_id
    }

    #[inline]
    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    #[inline]
    pub fn points(&self) -> Option<&PointSet> {
        self.points.as_ref()
    }

    #[inline]
    pub fn count(&self) -> CellCount {
        self.count
    }

    #[inline]
    pub fn level(&self) -> SupervisionLevel {
        self.level
    }

    #[inline]
    pub fn recorded_eyeball(&self) -> Option<u32> {
        self.recorded_eyeball
    }
}

fn validate_pixels(pixels: &Tensor) -> Result<(), DataError> {
    if pixels.channels() != 3 {
        return Err(DataError::BadChannelCount {
            channels: pixels.channels(),
        });
    }
    let (h, w) = (pixels.height(), pixels.width());
    if h == 0 || w == 0 || h % DIM_MULTIPLE != 0 || w % DIM_MULTIPLE != 0 {
        return Err(DataError::DimsNotDivisible {
            height: h,
            width: w,
        });
    }
    if !pixels
        .data()
        .iter()
        .all(|&v| v.is_finite() && (0.0..=1.0).contains(&v))
    {
        return Err(DataError::BadPixelRange);
    }
    Ok(())
}

/// Image-id lists for one experiment; the four lists are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_d1: Vec<String>,
    pub train_d2: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub p_percent: u8,
}

impl DatasetSplit {
    pub fn new(
        train_d1: Vec<String>,
        train_d2: Vec<String>,
        validation: Vec<String>,
        test: Vec<String>,
        p_percent: u8,
    ) -> Result<Self, DataError> {
        if p_percent > 100 {
            return Err(DataError::BadPercentage { p: p_percent });
        }
        let mut all: Vec<&String> = train_d1
            .iter()
            .chain(&train_d2)
            .chain(&validation)
            .chain(&test)
            .collect();
        all.sort();
        for pair in all.windows(2) {
            if pair[0] == pair[1] {
                return Err(DataError::SplitOverlap {
                    id: pair[0].clone(),
                });
            }
        }
        let total = train_d1.len() + train_d2.len();
        let expected = expected_d1_size(p_percent, total);
        if train_d1.len() != expected {
            return Err(DataError::SplitSizeMismatch {
                p: p_percent,
                total,
                expected,
                actual: train_d1.len(),
            });
        }
        Ok(Self {
            train_d1,
            train_d2,
            validation,
            test,
            p_percent,
        })
    }
}

/// `round(p/100 * n)` with round-half-away-from-zero.
pub fn expected_d1_size(p_percent: u8, n: usize) -> usize {
    libm::round(p_percent as f64 / 100.0 * n as f64) as usize
}

/// Splits training ids into a strongly annotated D1 part of size
/// `round(p/100 * n)` and a weakly annotated D2 remainder.
///
/// The choice is a seeded shuffle prefix, so for a fixed seed the D1 sets are
/// nested across percentages: `d1(p1) ⊆ d1(p2)` whenever `p1 <= p2`. This
/// mirrors a growing annotation budget.
pub fn partition(
    train_ids: &[String],
    p_percent: u8,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>), DataError> {
    if p_percent > 100 {
        return Err(DataError::BadPercentage { p: p_percent });
    }
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut rng = rng::stream(seed, STREAM_PARTITION);
    rng::shuffle(&mut rng, &mut order);
    let k = expected_d1_size(p_percent, train_ids.len());
    let d1 = order[..k].iter().map(|&i| train_ids[i].clone()).collect();
    let d2 = order[k..].iter().map(|&i| train_ids[i].clone()).collect();
    Ok((d1, d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    /// Independent oracle: offsets inside an inclusive Euclidean disk.
    fn disk_offset_count(radius: isize) -> usize {
        let mut n = 0;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if dr * dr + dc * dc <= radius * radius {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn single_point_disk_has_29_pixels() {
        // Frozen from the offset-enumeration oracle for radius 3.
        assert_eq!(disk_offset_count(3), 29);
        let points = PointSet::new(vec![(5, 5)], 16, 16).unwrap();
        let gt = generate_mask(&points, 3).unwrap();
        assert_eq!(gt.mask.count_ones(), 29);
        assert_eq!(gt.mask.get(5, 5), 1);
        assert_eq!(gt.dilation_radius, 3);
    }

    #[test]
    fn far_apart_points_stamp_disjoint_disks() {
        let points = PointSet::new(vec![(10, 5), (10, 25)], 32, 32).unwrap();
        let gt = generate_mask(&points, 3).unwrap();
        // 20 px apart > 2 * radius, so the disks cannot overlap.
        assert_eq!(gt.mask.count_ones(), 2 * disk_offset_count(3));
        let comps = crate::eval::count_components(&gt.mask);
        assert_eq!(comps.num_components, 2);
    }

    #[test]
    fn close_points_merge_into_one_component() {
        let points = PointSet::new(vec![(10, 10), (10, 14)], 32, 32).unwrap();
        let gt = generate_mask(&points, 3).unwrap();
        let comps = crate::eval::count_components(&gt.mask);
        assert_eq!(comps.num_components, 1);
    }

    #[test]
    fn mask_is_clipped_at_borders_but_points_stay_foreground() {
        let points = PointSet::new(vec![(0, 0)], 16, 16).unwrap();
        let gt = generate_mask(&points, 3).unwrap();
        assert_eq!(gt.mask.get(0, 0), 1);
        assert!(gt.mask.count_ones() < disk_offset_count(3));
    }

    #[test]
    fn mask_rejects_zero_radius_and_empty_points() {
        let points = PointSet::new(vec![(5, 5)], 16, 16).unwrap();
        assert_eq!(generate_mask(&points, 0), Err(DataError::ZeroRadius));
        let empty = PointSet::new(vec![], 16, 16).unwrap();
        assert_eq!(generate_mask(&empty, 3), Err(DataError::EmptyPointSet));
    }

    #[test]
    fn point_set_names_offending_point() {
        let err = PointSet::new(vec![(3, 3), (16, 2)], 16, 16).unwrap_err();
        assert_eq!(
            err,
            DataError::PointOutOfBounds {
                row: 16,
                col: 2,
                height: 16,
                width: 16
            }
        );
        assert!(format!("{err}").contains("(16, 2)"));
        let dup = PointSet::new(vec![(3, 3), (3, 3)], 16, 16).unwrap_err();
        assert_eq!(dup, DataError::DuplicatePoint { row: 3, col: 3 });
    }

    #[test]
    fn count_from_points_matches_cardinality() {
        let thirty: Vec<(usize, usize)> = (0..30).map(|i| (i / 8, i % 8)).collect();
        let ps = PointSet::new(thirty, 16, 16).unwrap();
        let count = count_from_points(&ps).unwrap();
        assert_eq!(count.value(), 30);
        assert_eq!(count.source(), CountSource::ExactFromPoints);

        let one = PointSet::new(vec![(0, 0)], 16, 16).unwrap();
        assert_eq!(count_from_points(&one).unwrap().value(), 1);

        let zero = PointSet::new(vec![], 16, 16).unwrap();
        assert_eq!(count_from_points(&zero), Err(DataError::EmptyPointSet));
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    #[test]
    fn partition_sizes_match_percentage() {
        let (d1, d2) = partition(&ids(100), 25, 42).unwrap();
        assert_eq!(d1.len(), 25);
        assert_eq!(d2.len(), 75);

        let (d1, d2) = partition(&ids(100), 100, 42).unwrap();
        assert_eq!(d1.len(), 100);
        assert!(d2.is_empty());
    }

    #[test]
    fn partition_is_deterministic_and_nested() {
        let pool = ids(60);
        let first = partition(&pool, 40, 7).unwrap();
        let second = partition(&pool, 40, 7).unwrap();
        assert_eq!(first, second);

        let (small, _) = partition(&pool, 20, 7).unwrap();
        let (large, _) = partition(&pool, 70, 7).unwrap();
        for id in &small {
            assert!(large.contains(id), "d1(20) must be a subset of d1(70)");
        }
    }

    fn tiny_pixels() -> Tensor {
        Tensor::zeros(3, 16, 16)
    }

    #[test]
    fn annotated_image_level_invariants() {
        let points = PointSet::new(vec![(4, 4), (8, 9)], 16, 16).unwrap();
        let img = AnnotatedImage::strong("a".to_string(), tiny_pixels(), points, Some(3)).unwrap();
        assert_eq!(img.level(), SupervisionLevel::D1);
        assert_eq!(img.count().value(), 2);
        assert_eq!(img.count().source(), CountSource::ExactFromPoints);

        let weak = img.demote().unwrap();
        assert_eq!(weak.level(), SupervisionLevel::D2);
        assert!(weak.points().is_none());
        assert_eq!(weak.count().value(), 3);
        assert_eq!(weak.count().source(), CountSource::Eyeballed);
    }

    #[test]
    fn annotated_image_rejects_bad_dims_and_missing_eyeball() {
        let bad = Tensor::zeros(3, 100, 100);
        let points = PointSet::new(vec![(4, 4)], 100, 100).unwrap();
        let err = AnnotatedImage::strong("a".to_string(), bad, points, None).unwrap_err();
        assert_eq!(
            err,
            DataError::DimsNotDivisible {
                height: 100,
                width: 100
            }
        );

        let points = PointSet::new(vec![(4, 4)], 16, 16).unwrap();
        let img = AnnotatedImage::strong("a".to_string(), tiny_pixels(), points, None).unwrap();
        assert!(matches!(
            img.demote(),
            Err(DataError::NoEyeballCount { .. })
        ));
    }

    #[test]
    fn split_rejects_overlap_and_size_mismatch() {
        let err = DatasetSplit::new(
            vec!["a".into()],
            vec!["b".into()],
            vec!["a".into()],
            vec![],
            50,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::SplitOverlap { .. }));

        let err = DatasetSplit::new(
            vec!["a".into()],
            vec!["b".into(), "c".into(), "d".into()],
            vec![],
            vec![],
            50,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::SplitSizeMismatch { .. }));

        DatasetSplit::new(
            vec!["a".into(), "b".into()],
            vec!["c".into(), "d".into()],
            vec!["e".into()],
            vec!["f".into()],
            50,
        )
        .unwrap();
    }
}
