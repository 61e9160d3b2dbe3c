//! Randomized invariants over the data, loss, and evaluation layers.
//!
//! Each property states something that must hold for every input, not just
//! frozen fixtures: dilation commutes with translation, annotation-budget
//! partitions nest as the budget grows, losses respect their bounds and
//! symmetries, cleanup only removes pixels, and the point matcher does not
//! care how the annotations were ordered.

use std::collections::BTreeSet;

use proptest::prelude::*;

use cytoloc_core::data::{expected_d1_size, generate_mask, partition, PointSet};
use cytoloc_core::eval::{
    binarize_and_clean, count_components, detection_metrics, match_points, DistanceMode,
    MatchResult,
};
use cytoloc_core::loss::{loss_consistency, loss_count, loss_localization};
use cytoloc_core::tensor::{BinaryMask, Tensor};

/// Distinct annotation points inside `[lo, hi) x [lo, hi)`.
fn distinct_points(
    lo: usize,
    hi: usize,
    max_len: usize,
) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::btree_set((lo..hi, lo..hi), 1..=max_len)
        .prop_map(|set| set.into_iter().collect())
}

fn match_instance() -> impl Strategy<Value = (Vec<u8>, Vec<(usize, usize)>, f64, DistanceMode)> {
    (
        prop::collection::vec(0u8..=1, 144),
        distinct_points(0, 12, 6),
        1.0f64..8.0,
        prop_oneof![Just(DistanceMode::Centroid), Just(DistanceMode::NearestPixel)],
    )
}

/// Pairs keyed by point coordinates instead of point index, so results from
/// differently ordered point lists can be compared directly.
fn pairs_by_coordinate(
    result: &MatchResult,
    points: &[(usize, usize)],
) -> BTreeSet<((usize, usize), u32)> {
    result
        .pairs
        .iter()
        .map(|&(pi, label)| (points[pi], label))
        .collect()
}

proptest! {
    /// Shifting every point shifts the dilated mask by the same offset.
    #[test]
    fn mask_dilation_commutes_with_translation(
        points in distinct_points(8, 20, 6),
        radius in 1usize..=4,
        shift in (0usize..=3, 0usize..=3),
    ) {
        let (dr, dc) = shift;
        let base = PointSet::new(points.clone(), 32, 32).unwrap();
        let moved = PointSet::new(
            points.iter().map(|&(r, c)| (r + dr, c + dc)).collect(),
            32,
            32,
        )
        .unwrap();
        let mask = generate_mask(&base, radius).unwrap().mask;
        let mask_moved = generate_mask(&moved, radius).unwrap().mask;
        // Points live in [8, 20) and radius + shift <= 7, so neither mask
        // touches the border and the translated window captures everything.
        for r in 0..32 - dr {
            for c in 0..32 - dc {
                prop_assert_eq!(mask.get(r, c), mask_moved.get(r + dr, c + dc));
            }
        }
    }

    /// Disks around well separated points stay separate: one component per point.
    #[test]
    fn separated_points_yield_one_component_each(
        cells in prop::collection::btree_set((0usize..4, 0usize..4), 1..=8),
        jitter in (0usize..=2, 0usize..=2),
        radius in 1usize..=3,
    ) {
        // Grid pitch 12 with jitter at most 2 keeps centers at least 10 apart,
        // beyond the 2 * radius + 1 needed for an 8-connected gap.
        let (jr, jc) = jitter;
        let points: Vec<(usize, usize)> = cells
            .iter()
            .map(|&(gr, gc)| (gr * 12 + 4 + jr, gc * 12 + 4 + jc))
            .collect();
        let set = PointSet::new(points.clone(), 48, 48).unwrap();
        let mask = generate_mask(&set, radius).unwrap().mask;
        let comps = count_components(&mask);
        prop_assert_eq!(comps.num_components, points.len());
    }

    /// For a fixed seed the strongly annotated subset grows by inclusion with
    /// the budget, has the documented rounded size, and the two halves always
    /// partition the id list.
    #[test]
    fn annotation_partitions_nest_and_cover(
        n in 1usize..=120,
        p_pair in (0u8..=100, 0u8..=100),
        seed in any::<u64>(),
    ) {
        let (p_lo, p_hi) = if p_pair.0 <= p_pair.1 { p_pair } else { (p_pair.1, p_pair.0) };
        let ids: Vec<String> = (0..n).map(|i| format!("img{i:04}")).collect();

        let (d1_lo, d2_lo) = partition(&ids, p_lo, seed).unwrap();
        let (d1_hi, _) = partition(&ids, p_hi, seed).unwrap();
        let (d1_again, d2_again) = partition(&ids, p_lo, seed).unwrap();

        prop_assert_eq!(d1_lo.len(), expected_d1_size(p_lo, n));
        prop_assert_eq!(&d1_lo, &d1_again);
        prop_assert_eq!(&d2_lo, &d2_again);

        let lo_set: BTreeSet<&String> = d1_lo.iter().collect();
        let hi_set: BTreeSet<&String> = d1_hi.iter().collect();
        prop_assert!(lo_set.is_subset(&hi_set));

        let mut union: Vec<String> = d1_lo.iter().chain(d2_lo.iter()).cloned().collect();
        union.sort();
        let mut sorted_ids = ids.clone();
        sorted_ids.sort();
        prop_assert_eq!(union, sorted_ids);
    }

    /// Relative count error is scale free: multiplying the true count and the
    /// prediction by the same factor leaves the loss unchanged.
    #[test]
    fn count_loss_is_scale_invariant(
        c_true in 1u32..=1000,
        c_pred in -100.0f64..2000.0,
        k in 1u32..=7,
    ) {
        let base = loss_count(c_true, c_pred).unwrap();
        let scaled = loss_count(c_true * k, c_pred * k as f64).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));

        let cons = loss_consistency(c_true, c_pred, 3.0).unwrap();
        let cons_scaled = loss_consistency(c_true * k, c_pred * k as f64, 3.0 * k as f64).unwrap();
        prop_assert!((cons - cons_scaled).abs() <= 1e-9 * cons.max(1.0));
    }

    /// Probability clamping bounds the per-pixel cross entropy, so the mean
    /// stays inside [0, -ln(1e-7)] for any inputs, including exact 0 and 1.
    #[test]
    fn localization_loss_respects_clamp_bounds(
        probs in prop::collection::vec(0.0f32..=1.0, 16),
        target in prop::collection::vec(0u8..=1, 16),
    ) {
        let probs = Tensor::from_vec(1, 4, 4, probs);
        let mask = BinaryMask::from_vec(4, 4, target);
        let loss = loss_localization(&probs, &mask).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= -(1e-7f64).ln() + 1e-9);
    }

    /// Cleanup is subtractive: it only removes pixels from the thresholded
    /// mask, every surviving component meets the area floor, and the
    /// component count never increases.
    #[test]
    fn cleanup_only_removes_small_components(
        probs in prop::collection::vec(0.0f32..=1.0, 64),
        threshold in 0.05f32..0.95,
        min_area in 0usize..=5,
    ) {
        let probs = Tensor::from_vec(1, 8, 8, probs);
        let raw = binarize_and_clean(&probs, threshold, 0);
        let cleaned = binarize_and_clean(&probs, threshold, min_area);

        for (c, r) in cleaned.data().iter().zip(raw.data()) {
            prop_assert!(c <= r);
        }
        let raw_comps = count_components(&raw);
        let cleaned_comps = count_components(&cleaned);
        prop_assert!(cleaned_comps.num_components <= raw_comps.num_components);
        for &area in &cleaned_comps.areas {
            prop_assert!(area >= min_area.max(1));
        }
    }

    /// Reordering the annotation list permutes point indices but leaves the
    /// matched (coordinate, object) pairs and all counts unchanged.
    #[test]
    fn matcher_ignores_point_order(instance in match_instance()) {
        let (bits, points, dist, mode) = instance;
        let mask = BinaryMask::from_vec(12, 12, bits);
        let comps = count_components(&mask);

        let forward = PointSet::new(points.clone(), 12, 12).unwrap();
        let mut reversed_points = points.clone();
        reversed_points.reverse();
        let reversed = PointSet::new(reversed_points.clone(), 12, 12).unwrap();

        let a = match_points(&forward, &comps, dist, mode);
        let b = match_points(&reversed, &comps, dist, mode);

        prop_assert_eq!(a.tp, b.tp);
        prop_assert_eq!(
            pairs_by_coordinate(&a, &points),
            pairs_by_coordinate(&b, &reversed_points)
        );
    }

    /// Structural bounds on any match result: hits are injective on both
    /// sides and cannot exceed either the point count or the object count.
    #[test]
    fn matcher_hits_are_injective_and_bounded(instance in match_instance()) {
        let (bits, points, dist, mode) = instance;
        let mask = BinaryMask::from_vec(12, 12, bits);
        let comps = count_components(&mask);
        let set = PointSet::new(points, 12, 12).unwrap();
        let result = match_points(&set, &comps, dist, mode);

        prop_assert_eq!(result.pairs.len(), result.tp);
        prop_assert!(result.tp <= result.num_points.min(result.num_objects));

        let point_ids: BTreeSet<usize> = result.pairs.iter().map(|&(pi, _)| pi).collect();
        let labels: BTreeSet<u32> = result.pairs.iter().map(|&(_, l)| l).collect();
        prop_assert_eq!(point_ids.len(), result.tp);
        prop_assert_eq!(labels.len(), result.tp);
        for &(pi, label) in &result.pairs {
            prop_assert!(pi < result.num_points);
            prop_assert!(label >= 1 && label as usize <= result.num_objects);
        }
    }

    /// Precision, recall, and F1 satisfy their defining identities and stay
    /// inside [0, 1], with empty denominators mapped to zero.
    #[test]
    fn detection_metrics_satisfy_identities(instance in match_instance()) {
        let (bits, points, dist, mode) = instance;
        let mask = BinaryMask::from_vec(12, 12, bits);
        let comps = count_components(&mask);
        let set = PointSet::new(points, 12, 12).unwrap();
        let result = match_points(&set, &comps, dist, mode);
        let (precision, recall, f1) = detection_metrics(&result);

        for v in [precision, recall, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if result.num_objects > 0 {
            prop_assert!((precision * result.num_objects as f64 - result.tp as f64).abs() < 1e-9);
        } else {
            prop_assert_eq!(precision, 0.0);
        }
        prop_assert!((recall * result.num_points as f64 - result.tp as f64).abs() < 1e-9);
        if precision + recall > 0.0 {
            let expect = 2.0 * precision * recall / (precision + recall);
            prop_assert!((f1 - expect).abs() < 1e-12);
        } else {
            prop_assert_eq!(f1, 0.0);
        }
    }
}
