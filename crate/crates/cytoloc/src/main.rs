//! Command-line front end: dataset synthesis, training, evaluation, the
//! (variant, p, seed) sweep, report regeneration, and architecture
//! inspection. All behavior is configured by one TOML file plus repeatable
//! `--set section.key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cytoloc::{checkpoint, config, dataset_io, experiment, metrics_io, report, AppConfig};
use cytoloc_core::{evaluate_images, synthesize_dataset, AnnotatedImage, Network, ParamGroup};

#[derive(Parser)]
#[command(
    name = "cytoloc",
    version,
    about = "Cell localization and counting under mixed supervision"
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.max_epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory with split hints.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Data seed; defaults to `experiment.data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write a run directory.
    Train {
        /// Dataset directory (from `synth` or hand-assembled).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Percentage of training images keeping point annotations; the
        /// rest are demoted to their eyeballed counts. Omit to use each
        /// image's native supervision level.
        #[arg(long)]
        p: Option<u8>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        center_crop: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Which images to evaluate: test, val, train, or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also render overlay PNGs (prediction outlines + annotations).
        #[arg(long)]
        emit_overlays: bool,
        #[arg(long)]
        center_crop: bool,
    },
    /// Run the full (p, variant, seed) comparison sweep; resumable.
    Sweep {
        /// Dataset directory; omitted means synthesize in memory from
        /// `[synth]` with `experiment.data_seed`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        center_crop: bool,
    },
    /// Regenerate summary.csv, tables.md, and plots from run directories.
    Report {
        /// Directory containing run subdirectories.
        #[arg(long)]
        runs: PathBuf,
        /// Output directory; defaults to the runs directory itself.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the layer table of the configured or checkpointed network.
    Describe {
        /// Read the architecture from a checkpoint instead of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input size as HxW.
        #[arg(long, default_value = "64x64")]
        input_size: String,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let app = config::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Synth { out_dir, seed } => cmd_synth(&app, &out_dir, seed),
        Command::Train { data, out_dir, p, seed, center_crop } => {
            cmd_train(&app, &data, &out_dir, p, seed, center_crop)
        }
        Command::Eval { data, checkpoint, out_dir, split, emit_overlays, center_crop } => {
            cmd_eval(&app, &data, &checkpoint, &out_dir, &split, emit_overlays, center_crop)
        }
        Command::Sweep { data, out_dir, center_crop } => {
            cmd_sweep(&app, data.as_deref(), &out_dir, center_crop)
        }
        Command::Report { runs, out_dir } => cmd_report(&runs, out_dir.as_deref()),
        Command::Describe { checkpoint, input_size } => {
            cmd_describe(&app, checkpoint.as_deref(), &input_size)
        }
    }
}

fn load_data(
    path: &Path,
    center_crop: bool,
) -> Result<(Vec<AnnotatedImage>, BTreeMap<String, String>)> {
    dataset_io::load_dataset(path, &dataset_io::LoadOptions { center_crop })
}

fn cmd_synth(app: &AppConfig, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(app.experiment.data_seed);
    let images = synthesize_dataset(&app.synth, seed)?;
    let assignment = experiment::assign_split(&images, &BTreeMap::new(), &app.experiment)?;
    let mut hints = BTreeMap::new();
    for (bucket, ids) in [
        ("train", &assignment.train),
        ("val", &assignment.validation),
        ("test", &assignment.test),
    ] {
        for id in ids {
            hints.insert(id.clone(), bucket.to_string());
        }
    }
    dataset_io::save_dataset(out_dir, &images, &hints)?;
    println!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        images.len(),
        assignment.train.len(),
        assignment.validation.len(),
        assignment.test.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    app: &AppConfig,
    data: &Path,
    out_dir: &Path,
    p: Option<u8>,
    seed: Option<u64>,
    center_crop: bool,
) -> Result<()> {
    let (images, hints) = load_data(data, center_crop)?;
    let assignment = experiment::assign_split(&images, &hints, &app.experiment)?;
    let seed = seed.unwrap_or(app.train.seed);
    let summary = experiment::run_one(
        app,
        &images,
        &assignment,
        app.train.variant,
        p,
        seed,
        out_dir,
    )?;
    println!(
        "{} (p={}%, seed {}): test f1 {:.4}, rd_loc {:.4}, rd_count {:.4}; \
         best epoch {} (val loss {:.4}); {:.1}s; run dir {}",
        summary.variant.name(),
        summary.p_percent,
        summary.seed,
        summary.f1,
        summary.rd_loc,
        summary.rd_count,
        summary.best_epoch,
        summary.best_val_loss,
        summary.wall_time_secs,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    app: &AppConfig,
    data: &Path,
    checkpoint_path: &Path,
    out_dir: &Path,
    split: &str,
    emit_overlays: bool,
    center_crop: bool,
) -> Result<()> {
    let (images, hints) = load_data(data, center_crop)?;
    let assignment = experiment::assign_split(&images, &hints, &app.experiment)?;
    let wanted: Option<&[String]> = match split {
        "test" => Some(&assignment.test),
        "val" => Some(&assignment.validation),
        "train" => Some(&assignment.train),
        "all" => None,
        other => bail!("unknown split `{other}` (expected test, val, train, or all)"),
    };
    let selected: Vec<AnnotatedImage> = images
        .iter()
        .filter(|i| wanted.is_none_or(|ids| ids.contains(&i.id().to_string())))
        .filter(|i| i.points().is_some())
        .cloned()
        .collect();
    if selected.is_empty() {
        bail!("no point-annotated images in split `{split}`");
    }

    let (network, epoch) = checkpoint::load(checkpoint_path)?;
    let report = evaluate_images(&network, &selected, &app.eval)?;
    metrics_io::write_metrics(out_dir, &report)?;
    if emit_overlays {
        metrics_io::write_overlays(out_dir, &network, &selected, &app.eval)?;
    }
    let a = &report.aggregate;
    println!(
        "checkpoint from epoch {epoch} on {} `{split}` images: precision {:.4}, \
         recall {:.4}, f1 {:.4}, rd_loc {:.4}, rd_count {:.4}",
        selected.len(),
        a.precision,
        a.recall,
        a.f1,
        a.rd_loc,
        a.rd_count
    );
    Ok(())
}

fn cmd_sweep(
    app: &AppConfig,
    data: Option<&Path>,
    out_dir: &Path,
    center_crop: bool,
) -> Result<()> {
    let (images, hints) = match data {
        Some(path) => load_data(path, center_crop)?,
        None => {
            let images = synthesize_dataset(&app.synth, app.experiment.data_seed)?;
            println!(
                "synthesized {} images in memory (data seed {})",
                images.len(),
                app.experiment.data_seed
            );
            (images, BTreeMap::new())
        }
    };
    let summaries = experiment::sweep(app, &images, &hints, out_dir)?;
    println!(
        "{} runs complete; see {} and {}",
        summaries.len(),
        out_dir.join("tables.md").display(),
        out_dir.join("summary.csv").display()
    );
    Ok(())
}

fn cmd_report(runs: &Path, out_dir: Option<&Path>) -> Result<()> {
    let out = out_dir.unwrap_or(runs);
    std::fs::create_dir_all(out)?;
    let summaries = report::collect_summaries(runs)?;
    if summaries.is_empty() {
        bail!("no summary.json files under {}", runs.display());
    }
    report::write_summary_csv(&out.join("summary.csv"), &summaries)?;
    report::write_tables_md(&out.join("tables.md"), &summaries)?;
    report::emit_plots(out, &summaries)?;
    println!("aggregated {} runs into {}", summaries.len(), out.display());
    Ok(())
}

fn cmd_describe(app: &AppConfig, ckpt: Option<&Path>, input_size: &str) -> Result<()> {
    let (h, w) = parse_size(input_size)?;
    let network = match ckpt {
        Some(path) => checkpoint::load(path)?.0,
        None => Network::new(app.network.clone(), 0)?,
    };
    let rows = network.describe((h, w));
    println!("{:<30} {:<18} {:>12}  {}", "layer", "output", "params", "group");
    for row in &rows {
        let group = row.group.map_or("-", ParamGroup::name);
        println!(
            "{:<30} {:<18} {:>12}  {}",
            row.name, row.output, row.params, group
        );
    }
    println!("\ntotal parameters: {}", network.num_params());
    for group in ParamGroup::ALL {
        let total: usize = rows
            .iter()
            .filter(|r| r.group == Some(group))
            .map(|r| r.params)
            .sum();
        println!("  {:<22} {}", group.name(), total);
    }
    Ok(())
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once('x')
        .with_context(|| format!("input size `{text}` is not of the form HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}
