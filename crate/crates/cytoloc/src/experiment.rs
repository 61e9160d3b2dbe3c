//! Experiment orchestration: train/validation/test assignment, the
//! p-percent annotation-budget partition with demotion to count-only
//! supervision, single runs, and the resumable (variant, p, seed) sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cytoloc_core::{
    evaluate_images, expected_d1_size, partition, rng, train, AnnotatedImage, DatasetSplit,
    Network, Variant,
};

use crate::checkpoint;
use crate::config::AppConfig;
use crate::metrics_io;
use crate::report::{self, RunSummary};
use crate::rundir::RunDir;

/// Stream id for the train/val/test assignment; distinct from every stream
/// the core crate uses, so the assignment never correlates with training.
const STREAM_SPLIT: u64 = 0x53504c49;

/// Sweep layout plus the dataset-splitting knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Annotation-budget percentages to sweep.
    pub p_values: Vec<u8>,
    pub variants: Vec<Variant>,
    /// One full training run per seed; tables report mean ± std over them.
    pub seeds: Vec<u64>,
    /// Fraction of evaluable (point-annotated) images held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining evaluable images used for validation.
    pub val_fraction: f64,
    /// Seed of the train/val/test assignment; fixed across all runs of a
    /// sweep so every run sees the same test set.
    pub split_seed: u64,
    /// Seed for synthesizing data when no dataset directory is given.
    pub data_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            p_values: vec![100, 75, 50, 25],
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            test_fraction: 0.2,
            val_fraction: 0.2,
            split_seed: 0,
            data_seed: 42,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            bail!("p_values, variants, and seeds must all be non-empty");
        }
        if let Some(p) = self.p_values.iter().find(|&&p| p > 100) {
            bail!("p_value {p} exceeds 100");
        }
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(f.is_finite() && (0.0..0.95).contains(&f)) {
                bail!("{name} must lie in [0, 0.95)");
            }
        }
        Ok(())
    }
}

/// Train/validation/test image-id lists (the training list is split into
/// D1/D2 per run by [`partition`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Assigns every image to train, validation, or test.
///
/// Hinted images (`split_hint` in the manifest) go where the hint says;
/// the rest are assigned by a seeded shuffle. Validation and test images
/// must carry point annotations (losses and metrics need them), so
/// count-only images always train and the fractions apply to the
/// point-annotated pool.
pub fn assign_split(
    images: &[AnnotatedImage],
    hints: &BTreeMap<String, String>,
    exp: &ExperimentConfig,
) -> Result<SplitAssignment> {
    let known: BTreeSet<&str> = images.iter().map(|i| i.id()).collect();
    for id in hints.keys() {
        if !known.contains(id.as_str()) {
            bail!("split hint names unknown image `{id}`");
        }
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut free_strong = Vec::new();
    let mut ordered: Vec<&AnnotatedImage> = images.iter().collect();
    ordered.sort_by(|a, b| a.id().cmp(b.id()));

    for image in ordered {
        let id = image.id().to_string();
        let has_points = image.points().is_some();
        match hints.get(&id).map(String::as_str) {
            Some("train") => train.push(id),
            Some(bucket @ ("val" | "test")) => {
                if !has_points {
                    bail!("image `{id}` is hinted `{bucket}` but has no point annotations");
                }
                if bucket == "val" {
                    validation.push(id);
                } else {
                    test.push(id);
                }
            }
            Some(other) => bail!("split hint `{other}` for image `{id}`"),
            None if has_points => free_strong.push(id),
            None => train.push(id),
        }
    }

    let mut order: Vec<usize> = (0..free_strong.len()).collect();
    let mut rng = rng::stream(exp.split_seed, STREAM_SPLIT);
    rng::shuffle(&mut rng, &mut order);
    let n = free_strong.len();
    let n_test = (exp.test_fraction * n as f64).round() as usize;
    let n_val = (exp.val_fraction * (n - n_test) as f64).round() as usize;
    for (rank, &idx) in order.iter().enumerate() {
        let id = free_strong[idx].clone();
        if rank < n_test {
            test.push(id);
        } else if rank < n_test + n_val {
            validation.push(id);
        } else {
            train.push(id);
        }
    }

    if train.is_empty() {
        bail!("no images left for training");
    }
    if validation.is_empty() {
        bail!("validation set is empty; raise val_fraction or add `val` split hints");
    }
    if test.is_empty() {
        bail!("test set is empty; raise test_fraction or add `test` split hints");
    }
    for list in [&mut train, &mut validation, &mut test] {
        list.sort();
    }
    Ok(SplitAssignment { train, validation, test })
}

/// Splits the training pool for one run. With `p = Some(percent)` the pool
/// is partitioned by annotation budget and D2 members are later demoted;
/// every selected D1 image must carry points. With `p = None` the images
/// keep their native supervision level: point-annotated images form D1,
/// count-only images form D2.
pub fn build_split(
    images: &[AnnotatedImage],
    assignment: &SplitAssignment,
    p: Option<u8>,
    seed: u64,
) -> Result<DatasetSplit> {
    let by_id: BTreeMap<&str, &AnnotatedImage> = images.iter().map(|i| (i.id(), i)).collect();
    let has_points =
        |id: &String| by_id.get(id.as_str()).is_some_and(|i| i.points().is_some());

    match p {
        Some(percent) => {
            let (d1, d2) = partition(&assignment.train, percent, seed)?;
            if let Some(bad) = d1.iter().find(|id| !has_points(id)) {
                bail!(
                    "cannot run a {percent}% annotation-budget experiment: image `{bad}` \
                     has no point annotations (budget experiments need a fully \
                     point-annotated training pool)"
                );
            }
            Ok(DatasetSplit::new(
                d1,
                d2,
                assignment.validation.clone(),
                assignment.test.clone(),
                percent,
            )?)
        }
        None => {
            let (d1, d2): (Vec<String>, Vec<String>) =
                assignment.train.iter().cloned().partition(has_points);
            let total = d1.len().max(1) + d2.len();
            let label = ((100.0 * d1.len() as f64) / total as f64).round() as u8;
            // Native splits bypass the budget-size invariant: the label is
            // informational, not a partition request.
            Ok(DatasetSplit {
                train_d1: d1,
                train_d2: d2,
                validation: assignment.validation.clone(),
                test: assignment.test.clone(),
                p_percent: label,
            })
        }
    }
}

/// The images a run trains on: D2 members are demoted to their recorded
/// eyeballed count, everything else passes through unchanged.
pub fn demote_for_split(
    images: &[AnnotatedImage],
    split: &DatasetSplit,
) -> Result<Vec<AnnotatedImage>> {
    let d2: BTreeSet<&str> = split.train_d2.iter().map(String::as_str).collect();
    images
        .iter()
        .map(|image| {
            if d2.contains(image.id()) {
                image.demote().with_context(|| {
                    format!(
                        "image `{}` cannot be demoted to count-only supervision: \
                         no eyeballed count was recorded for it",
                        image.id()
                    )
                })
            } else {
                Ok(image.clone())
            }
        })
        .collect()
}

/// A config snapshot that reproduces this exact run when fed back to the
/// tool: the per-run seed, variant, and percentage are baked in.
fn run_snapshot(app: &AppConfig, variant: Variant, p: Option<u8>, seed: u64) -> String {
    let mut pinned = app.clone();
    pinned.train.variant = variant;
    pinned.train.seed = seed;
    pinned.experiment.variants = vec![variant];
    pinned.experiment.seeds = vec![seed];
    if let Some(p) = p {
        pinned.experiment.p_values = vec![p];
    }
    pinned.snapshot()
}

/// Trains one (variant, p, seed) combination and evaluates its best
/// checkpoint on the test set. Everything lands in `run_root`.
pub fn run_one(
    app: &AppConfig,
    images: &[AnnotatedImage],
    assignment: &SplitAssignment,
    variant: Variant,
    p: Option<u8>,
    seed: u64,
    run_root: &Path,
) -> Result<RunSummary> {
    let split = build_split(images, assignment, p, seed)?;
    let data = demote_for_split(images, &split)?;

    let mut config = app.train.clone();
    config.variant = variant;
    config.seed = seed;

    let run = RunDir::create(run_root, &run_snapshot(app, variant, p, seed))?;
    let network = Network::new(app.network.clone(), seed)?;

    let started = Instant::now();
    let outcome = {
        let mut logger = run.logger()?;
        train(network, &split, &data, &config, &mut logger)?
    };
    let wall_time_secs = started.elapsed().as_secs_f64();

    let best = outcome.best_network();
    checkpoint::save(&run.best_checkpoint(), &best, outcome.best_epoch)?;
    checkpoint::save(&run.last_checkpoint(), &outcome.network, config.max_epochs - 1)?;

    let test_images: Vec<AnnotatedImage> = images
        .iter()
        .filter(|i| split.test.contains(&i.id().to_string()))
        .cloned()
        .collect();
    let report = evaluate_images(&best, &test_images, &app.eval)?;
    metrics_io::write_metrics(run.path(), &report)?;

    let summary = RunSummary {
        variant,
        p_percent: split.p_percent,
        seed,
        precision: report.aggregate.precision,
        recall: report.aggregate.recall,
        f1: report.aggregate.f1,
        rd_loc: report.aggregate.rd_loc,
        rd_count: report.aggregate.rd_count,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        wall_time_secs,
    };
    std::fs::write(run.summary_path(), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Runs the full cross product of `p_values x variants x seeds`, skipping
/// combinations whose run directory already holds a summary (so an
/// interrupted sweep resumes where it stopped), then writes the aggregate
/// report into `out_root`.
pub fn sweep(
    app: &AppConfig,
    images: &[AnnotatedImage],
    hints: &BTreeMap<String, String>,
    out_root: &Path,
) -> Result<Vec<RunSummary>> {
    let exp = &app.experiment;
    let assignment = assign_split(images, hints, exp)?;
    std::fs::create_dir_all(out_root)?;

    let mut summaries = Vec::new();
    for &p in &exp.p_values {
        for &variant in &exp.variants {
            for &seed in &exp.seeds {
                let name = format!("{}_p{:03}_s{}", variant.name(), p, seed);
                let run_root = out_root.join(&name);
                let summary_file = run_root.join("summary.json");
                let summary = if summary_file.is_file() {
                    let text = std::fs::read_to_string(&summary_file)?;
                    let summary: RunSummary = serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", summary_file.display()))?;
                    println!("{name}: already done, skipping");
                    summary
                } else {
                    let summary =
                        run_one(app, images, &assignment, variant, Some(p), seed, &run_root)
                            .with_context(|| format!("run {name}"))?;
                    println!(
                        "{name}: f1 {:.4}, rd_count {:.4}, best epoch {}, {:.1}s",
                        summary.f1, summary.rd_count, summary.best_epoch, summary.wall_time_secs
                    );
                    summary
                };
                summaries.push(summary);
            }
        }
    }

    report::write_summary_csv(&out_root.join("summary.csv"), &summaries)?;
    report::write_tables_md(&out_root.join("tables.md"), &summaries)?;
    report::emit_plots(out_root, &summaries)?;
    Ok(summaries)
}

/// Number of training images a `p` percent budget would strongly annotate;
/// exposed for CLI feedback.
pub fn budget_size(p: u8, train_pool: usize) -> usize {
    expected_d1_size(p, train_pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cytoloc_core::{synthesize_dataset, SupervisionLevel, SynthConfig};

    fn images(n: usize) -> Vec<AnnotatedImage> {
        synthesize_dataset(
            &SynthConfig {
                num_images: n,
                height: 32,
                width: 32,
                count_min: 3,
                count_max: 6,
                ..SynthConfig::default()
            },
            7,
        )
        .unwrap()
    }

    fn exp() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn assignment_is_deterministic_and_disjoint() {
        let imgs = images(20);
        let a = assign_split(&imgs, &BTreeMap::new(), &exp()).unwrap();
        let b = assign_split(&imgs, &BTreeMap::new(), &exp()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.validation.len(), 3);
        assert_eq!(a.train.len(), 13);
        let mut all: Vec<&String> =
            a.train.iter().chain(&a.validation).chain(&a.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn hints_override_fractions() {
        let imgs = images(12);
        let mut hints = BTreeMap::new();
        hints.insert(imgs[0].id().to_string(), "test".to_string());
        hints.insert(imgs[1].id().to_string(), "val".to_string());
        hints.insert(imgs[2].id().to_string(), "train".to_string());
        let a = assign_split(&imgs, &hints, &exp()).unwrap();
        assert!(a.test.contains(&imgs[0].id().to_string()));
        assert!(a.validation.contains(&imgs[1].id().to_string()));
        assert!(a.train.contains(&imgs[2].id().to_string()));
    }

    #[test]
    fn count_only_images_never_reach_validation_or_test() {
        let mut imgs = images(16);
        for img in imgs.iter_mut().take(6) {
            *img = img.demote().unwrap();
        }
        let a = assign_split(&imgs, &BTreeMap::new(), &exp()).unwrap();
        for id in a.validation.iter().chain(&a.test) {
            let img = imgs.iter().find(|i| i.id() == id).unwrap();
            assert!(img.points().is_some());
        }
        for img in imgs.iter().filter(|i| i.points().is_none()) {
            assert!(a.train.contains(&img.id().to_string()));
        }
    }

    #[test]
    fn weak_image_hinted_to_test_is_rejected() {
        let mut imgs = images(8);
        imgs[0] = imgs[0].demote().unwrap();
        let mut hints = BTreeMap::new();
        hints.insert(imgs[0].id().to_string(), "test".to_string());
        assert!(assign_split(&imgs, &hints, &exp()).is_err());
    }

    #[test]
    fn budget_split_demotes_the_complement_of_d1() {
        let imgs = images(20);
        let a = assign_split(&imgs, &BTreeMap::new(), &exp()).unwrap();
        let split = build_split(&imgs, &a, Some(25), 3).unwrap();
        assert_eq!(split.train_d1.len(), 3); // round(0.25 * 13)
        assert_eq!(split.train_d2.len(), 10);

        let data = demote_for_split(&imgs, &split).unwrap();
        for image in &data {
            let in_d2 = split.train_d2.contains(&image.id().to_string());
            assert_eq!(image.level() == SupervisionLevel::D2, in_d2);
        }
    }

    #[test]
    fn budget_splits_nest_across_percentages() {
        let imgs = images(20);
        let a = assign_split(&imgs, &BTreeMap::new(), &exp()).unwrap();
        let lo = build_split(&imgs, &a, Some(25), 9).unwrap();
        let hi = build_split(&imgs, &a, Some(75), 9).unwrap();
        let hi_set: BTreeSet<&String> = hi.train_d1.iter().collect();
        assert!(lo.train_d1.iter().all(|id| hi_set.contains(id)));
    }

    #[test]
    fn native_split_keeps_supervision_levels() {
        let mut imgs = images(16);
        for img in imgs.iter_mut().take(5) {
            *img = img.demote().unwrap();
        }
        let a = assign_split(&imgs, &BTreeMap::new(), &exp()).unwrap();
        let split = build_split(&imgs, &a, None, 0).unwrap();
        assert_eq!(split.train_d2.len(), 5);
        assert_eq!(split.train_d1.len(), a.train.len() - 5);
    }
}
