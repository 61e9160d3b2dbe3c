//! Sweep aggregation: reads the `summary.json` persisted by each run,
//! writes `summary.csv`, comparison tables (`tables.md`, mean over seeds
//! with standard deviation), and the metric-versus-percentage charts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cytoloc_core::Variant;

use crate::plots::{line_plot, Series};

/// One training run's result, as persisted in its run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub p_percent: u8,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rd_loc: f64,
    pub rd_count: f64,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub wall_time_secs: f64,
}

/// Scans the immediate subdirectories of `root` for `summary.json` files.
pub fn collect_summaries(root: &Path) -> Result<Vec<RunSummary>> {
    let mut summaries = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .collect::<std::io::Result<Vec<_>>>()?;
    dirs.sort_by_key(|e| e.file_name());
    for entry in dirs {
        let candidate = entry.path().join("summary.json");
        if candidate.is_file() {
            let text = fs::read_to_string(&candidate)?;
            let summary: RunSummary = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", candidate.display()))?;
            summaries.push(summary);
        }
    }
    Ok(summaries)
}

pub fn write_summary_csv(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "p_percent",
        "seed",
        "precision",
        "recall",
        "f1",
        "rd_loc",
        "rd_count",
        "best_epoch",
        "best_val_loss",
        "wall_time_secs",
    ])?;
    for s in summaries {
        w.write_record([
            s.variant.name().to_string(),
            s.p_percent.to_string(),
            s.seed.to_string(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.f1.to_string(),
            s.rd_loc.to_string(),
            s.rd_count.to_string(),
            s.best_epoch.to_string(),
            s.best_val_loss.to_string(),
            s.wall_time_secs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn seed_values<F: Fn(&RunSummary) -> f64>(
    summaries: &[RunSummary],
    variant: Variant,
    p: u8,
    metric: F,
) -> Vec<f64> {
    summaries
        .iter()
        .filter(|s| s.variant == variant && s.p_percent == p)
        .map(metric)
        .collect()
}

/// One markdown table per metric: rows are annotation percentages (highest
/// first), columns are variants, cells are `mean ± std` over seeds.
pub fn write_tables_md(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    if summaries.is_empty() {
        bail!("no run summaries to report");
    }
    let mut ps: Vec<u8> = summaries
        .iter()
        .map(|s| s.p_percent)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ps.reverse();
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| summaries.iter().any(|s| s.variant == *v))
        .collect();

    let metrics: [(&str, fn(&RunSummary) -> f64); 5] = [
        ("F1", |s| s.f1),
        ("Precision", |s| s.precision),
        ("Recall", |s| s.recall),
        ("RD_Loc", |s| s.rd_loc),
        ("RD_Count", |s| s.rd_count),
    ];

    let mut md = String::from("# Sweep results\n\nCells are mean ± std over seeds.\n");
    for (name, metric) in metrics {
        md.push_str(&format!("\n## {name}\n\n| p (%) |"));
        for v in &variants {
            md.push_str(&format!(" {} |", v.name()));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(variants.len()));
        md.push('\n');
        for &p in &ps {
            md.push_str(&format!("| {p} |"));
            for &v in &variants {
                let values = seed_values(summaries, v, p, metric);
                if values.is_empty() {
                    md.push_str(" n/a |");
                } else {
                    let (mean, std) = mean_std(&values);
                    md.push_str(&format!(" {mean:.4} ± {std:.4} |"));
                }
            }
            md.push('\n');
        }
    }
    fs::write(path, md)?;
    Ok(())
}

/// Seed-averaged metric-versus-p charts, one line per variant.
pub fn emit_plots(out_dir: &Path, summaries: &[RunSummary]) -> Result<()> {
    if summaries.is_empty() {
        bail!("no run summaries to plot");
    }
    let ps: BTreeSet<u8> = summaries.iter().map(|s| s.p_percent).collect();
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| summaries.iter().any(|s| s.variant == *v))
        .collect();

    let metrics: [(&str, &str, fn(&RunSummary) -> f64); 3] = [
        ("f1_vs_p", "Object-level F1", |s| s.f1),
        ("rd_loc_vs_p", "Relative count error (mask components)", |s| s.rd_loc),
        ("rd_count_vs_p", "Relative count error (counting head)", |s| s.rd_count),
    ];
    for (stem, y_label, metric) in metrics {
        let series: Vec<Series> = variants
            .iter()
            .map(|&v| Series {
                label: v.name().to_string(),
                points: ps
                    .iter()
                    .filter_map(|&p| {
                        let values = seed_values(summaries, v, p, metric);
                        (!values.is_empty()).then(|| (p as f64, mean_std(&values).0))
                    })
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        line_plot(
            &out_dir.join(format!("{stem}.svg")),
            y_label,
            "p (%) of training images with point annotations",
            y_label,
            &series,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(variant: Variant, p: u8, seed: u64, f1: f64) -> RunSummary {
        RunSummary {
            variant,
            p_percent: p,
            seed,
            precision: f1,
            recall: f1,
            f1,
            rd_loc: 1.0 - f1,
            rd_count: 1.0 - f1,
            best_epoch: 3,
            best_val_loss: 0.5,
            wall_time_secs: 1.0,
        }
    }

    #[test]
    fn mean_std_matches_hand_computation() {
        let (mean, std) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn tables_have_one_row_per_percentage_and_seed_averaged_cells() {
        let dir = tempfile::tempdir().unwrap();
        let summaries = vec![
            summary(Variant::MixedSupervision, 100, 0, 0.9),
            summary(Variant::MixedSupervision, 100, 1, 0.8),
            summary(Variant::MixedSupervision, 25, 0, 0.6),
            summary(Variant::SingleLocalization, 25, 0, 0.5),
        ];
        let path = dir.path().join("tables.md");
        write_tables_md(&path, &summaries).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("## F1"));
        // Mean of 0.9 and 0.8; sample std is 0.0707.
        assert!(text.contains("0.8500 ± 0.0707"));
        let f1_section: Vec<&str> = text.lines().skip_while(|l| *l != "## F1").collect();
        assert!(f1_section.iter().any(|l| l.starts_with("| 100 |")));
        assert!(f1_section.iter().any(|l| l.starts_with("| 25 |")));
        // No single_counting runs were given, so no column for it.
        assert!(!text.contains("single_counting"));
    }

    #[test]
    fn summaries_round_trip_through_run_directories() {
        let root = tempfile::tempdir().unwrap();
        let summaries = vec![
            summary(Variant::MixedSupervision, 50, 0, 0.7),
            summary(Variant::SingleCounting, 50, 1, 0.65),
        ];
        for (i, s) in summaries.iter().enumerate() {
            let dir = root.path().join(format!("run{i}"));
            fs::create_dir_all(&dir).unwrap();
            fs::write(
                dir.join("summary.json"),
                serde_json::to_string_pretty(s).unwrap(),
            )
            .unwrap();
        }
        // A directory without a summary is skipped, not an error.
        fs::create_dir_all(root.path().join("not_a_run")).unwrap();

        let collected = collect_summaries(root.path()).unwrap();
        assert_eq!(collected, summaries);

        write_summary_csv(&root.path().join("summary.csv"), &collected).unwrap();
        let csv_text = fs::read_to_string(root.path().join("summary.csv")).unwrap();
        assert_eq!(csv_text.lines().count(), 3);
        assert!(csv_text.contains("mixed_supervision,50,0"));

        emit_plots(root.path(), &collected).unwrap();
        assert!(root.path().join("f1_vs_p.svg").is_file());
        assert!(root.path().join("rd_count_vs_p.svg").is_file());
    }
}
