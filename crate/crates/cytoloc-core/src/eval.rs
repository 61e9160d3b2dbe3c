//! Object-level evaluation: thresholding and cleaning of predicted maps,
//! 8-connected component labeling, point-to-object matching, detection
//! metrics, and the two relative-difference count metrics.
//!
//! A predicted object counts as a true positive for a point annotation only
//! under the exactly-one rule: the point must have exactly one candidate
//! object within the distance threshold, and that object must have no other
//! candidate point.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, PointSet};
use crate::net::Network;
use crate::tensor::{BinaryMask, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("image '{id}' carries no point annotations; object-level evaluation needs them")]
    MissingPoints { id: String },
    #[error("no images to evaluate")]
    EmptyTestSet,
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// How point-to-object distance is measured during matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Euclidean distance from the point to the object's centroid.
    #[default]
    Centroid,
    /// Euclidean distance from the point to the nearest pixel of the object.
    NearestPixel,
}

/// Evaluation settings; defaults follow the dense-tissue setup (no area
/// filtering, 10 px matching radius).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Binarization threshold on the predicted probability map.
    pub threshold: f32,
    /// Connected components smaller than this many pixels are removed.
    pub min_area: usize,
    /// Matching radius in pixels.
    pub dist_threshold: f64,
    pub distance_mode: DistanceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_area: 0,
            dist_threshold: 10.0,
            distance_mode: DistanceMode::Centroid,
        }
    }
}

/// 8-connected components of a binary mask, labeled `1..=num_components` in
/// row-major first-encounter order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledComponents {
    pub label_map: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub num_components: usize,
    /// Mean pixel coordinate `(row, col)` per component.
    pub centroids: Vec<(f64, f64)>,
    pub areas: Vec<usize>,
}

/// Labels 8-connected foreground regions and computes their centroids and areas.
pub fn count_components(mask: &BinaryMask) -> LabeledComponents {
    let (h, w) = (mask.height(), mask.width());
    let data = mask.data();
    let mut label_map = vec![0u32; h * w];
    let mut centroids = Vec::new();
    let mut areas = Vec::new();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut next_label = 0u32;

    for start in 0..h * w {
        if data[start] == 0 || label_map[start] != 0 {
            continue;
        }
        next_label += 1;
        label_map[start] = next_label;
        queue.push_back(start);
        let mut area = 0usize;
        let mut row_sum = 0.0f64;
        let mut col_sum = 0.0f64;
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            area += 1;
            row_sum += r as f64;
            col_sum += c as f64;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nr >= h as i64 || nc < 0 || nc >= w as i64 {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if data[nidx] == 1 && label_map[nidx] == 0 {
                        label_map[nidx] = next_label;
                        queue.push_back(nidx);
                    }
                }
            }
        }
        centroids.push((row_sum / area as f64, col_sum / area as f64));
        areas.push(area);
    }

    LabeledComponents {
        label_map,
        height: h,
        width: w,
        num_components: next_label as usize,
        centroids,
        areas,
    }
}

/// Thresholds a probability map and removes 8-connected components smaller
/// than `min_area` pixels.
pub fn binarize_and_clean(mask_probs: &Tensor, threshold: f32, min_area: usize) -> BinaryMask {
    assert!(
        mask_probs.channels() == 1,
        "expected a single-channel probability map"
    );
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie strictly between 0 and 1"
    );
    let (h, w) = (mask_probs.height(), mask_probs.width());
    let data: Vec<u8> = mask_probs
        .data()
        .iter()
        .map(|&p| u8::from(p >= threshold))
        .collect();
    let mut mask = BinaryMask::from_vec(h, w, data);
    if min_area > 0 {
        let comps = count_components(&mask);
        for idx in 0..h * w {
            let label = comps.label_map[idx];
            if label != 0 && comps.areas[(label - 1) as usize] < min_area {
                mask.set(idx / w, idx % w, 0);
            }
        }
    }
    mask
}

/// Outcome of matching point annotations against predicted objects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub num_points: usize,
    pub num_objects: usize,
    /// `(point_index, object_label)` for each true positive.
    pub pairs: Vec<(usize, u32)>,
}

/// Applies the exactly-one matching rule: a candidate edge joins point `p_i`
/// and object `q_j` when their distance is at most `dist_threshold`; `p_i` is
/// a true positive iff it has exactly one candidate object and that object
/// has no other candidate point.
pub fn match_points(
    points: &PointSet,
    components: &LabeledComponents,
    dist_threshold: f64,
    mode: DistanceMode,
) -> MatchResult {
    assert!(dist_threshold > 0.0, "distance threshold must be positive");
    let num_points = points.len();
    let num_objects = components.num_components;

    // Pixel lists are only needed for nearest-pixel distances.
    let pixels_by_label: Vec<Vec<(usize, usize)>> = match mode {
        DistanceMode::Centroid => Vec::new(),
        DistanceMode::NearestPixel => {
            let mut lists = vec![Vec::new(); num_objects];
            for (idx, &label) in components.label_map.iter().enumerate() {
                if label != 0 {
                    lists[(label - 1) as usize]
                        .push((idx / components.width, idx % components.width));
                }
            }
            lists
        }
    };

    let threshold_sq = dist_threshold * dist_threshold;
    let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); num_points];
    let mut object_degree = vec![0usize; num_objects];
    for (pi, &(pr, pc)) in points.points().iter().enumerate() {
        for qi in 0..num_objects {
            let dist_sq = match mode {
                DistanceMode::Centroid => {
                    let (cr, cc) = components.centroids[qi];
                    let (dr, dc) = (pr as f64 - cr, pc as f64 - cc);
                    dr * dr + dc * dc
                }
                DistanceMode::NearestPixel => pixels_by_label[qi]
                    .iter()
                    .map(|&(r, c)| {
                        let (dr, dc) = (pr as f64 - r as f64, pc as f64 - c as f64);
                        dr * dr + dc * dc
                    })
                    .fold(f64::INFINITY, f64::min),
            };
            if dist_sq <= threshold_sq {
                candidates[pi].push(qi);
                object_degree[qi] += 1;
            }
        }
    }

    let mut pairs = Vec::new();
    for (pi, cand) in candidates.iter().enumerate() {
        if let [qi] = cand[..] {
            if object_degree[qi] == 1 {
                pairs.push((pi, qi as u32 + 1));
            }
        }
    }

    MatchResult {
        tp: pairs.len(),
        num_points,
        num_objects,
        pairs,
    }
}

/// Object-level `(precision, recall, f1)`; degenerate denominators yield 0.
pub fn detection_metrics(result: &MatchResult) -> (f64, f64, f64) {
    let precision = if result.num_objects > 0 {
        result.tp as f64 / result.num_objects as f64
    } else {
        0.0
    };
    let recall = if result.num_points > 0 {
        result.tp as f64 / result.num_points as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// `|c_true - c_est| / c_true`; the count error normalized by the ground truth.
pub fn relative_difference(c_true: u32, c_est: f64) -> f64 {
    assert!(c_true >= 1, "ground-truth count must be positive");
    libm::fabs(c_true as f64 - c_est) / c_true as f64
}

/// Per-image evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rd_loc: f64,
    pub rd_count: f64,
    pub tp: usize,
    pub num_points: usize,
    pub num_objects: usize,
    /// Counting-head output after clamping below at zero.
    pub count_estimate: f64,
    /// Components in the cleaned predicted mask.
    pub component_count: usize,
}

/// Unweighted means over the test images.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rd_loc: f64,
    pub rd_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    pub fn from_per_image(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mut agg = AggregateMetrics::default();
        for m in &per_image {
            agg.precision += m.precision / n;
            agg.recall += m.recall / n;
            agg.f1 += m.f1 / n;
            agg.rd_loc += m.rd_loc / n;
            agg.rd_count += m.rd_count / n;
        }
        Self { per_image, aggregate: agg }
    }
}

/// Evaluates one annotated image against the network's prediction.
///
/// Ground-truth counts always come from the point annotations, never from
/// eyeballing, so the image must carry points.
pub fn evaluate_image(
    network: &Network,
    image: &AnnotatedImage,
    config: &EvalConfig,
) -> Result<ImageMetrics, EvalError> {
    let points = image.points().ok_or_else(|| EvalError::MissingPoints {
        id: image.id().into(),
    })?;
    let c_true = points.len() as u32;
    let prediction = network.predict(image.pixels())?;
    let mask = binarize_and_clean(&prediction.mask_probs, config.threshold, config.min_area);
    let components = count_components(&mask);
    let matches = match_points(points, &components, config.dist_threshold, config.distance_mode);
    let (precision, recall, f1) = detection_metrics(&matches);
    let count_estimate = (prediction.count_estimate as f64).max(0.0);
    Ok(ImageMetrics {
        image_id: image.id().into(),
        precision,
        recall,
        f1,
        rd_loc: relative_difference(c_true, components.num_components as f64),
        rd_count: relative_difference(c_true, count_estimate),
        tp: matches.tp,
        num_points: matches.num_points,
        num_objects: matches.num_objects,
        count_estimate,
        component_count: components.num_components,
    })
}

/// Evaluates a test set and aggregates with unweighted means.
pub fn evaluate_images(
    network: &Network,
    images: &[AnnotatedImage],
    config: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let per_image = images
        .iter()
        .map(|img| evaluate_image(network, img, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::from_per_image(per_image))
}
