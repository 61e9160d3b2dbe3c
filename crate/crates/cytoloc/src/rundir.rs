//! Per-run output directory: the exact configuration that produced the run,
//! streaming loss logs, per-epoch history, and the two checkpoints.
//!
//! ```text
//! <run>/config.snapshot        TOML as executed (file + overrides)
//! <run>/losses.csv             epoch,image_id,level,l_s,l_c,l_t,joint
//! <run>/history.csv            epoch,train_joint,val_joint
//! <run>/checkpoints/best       lowest validation joint loss
//! <run>/checkpoints/last       final epoch
//! <run>/metrics.json|csv       test-set evaluation of the best checkpoint
//! <run>/summary.json           one-line result for sweep aggregation
//! ```

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use cytoloc_core::{HistoryRow, LossBreakdown, SupervisionLevel, TrainObserver};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory tree and persists the config snapshot.
    pub fn create(root: &Path, config_snapshot: &str) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))
            .with_context(|| format!("creating run directory {}", root.display()))?;
        fs::write(root.join("config.snapshot"), config_snapshot)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("best")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    /// Opens the streaming csv logs for a training run.
    pub fn logger(&self) -> Result<CsvLogger> {
        CsvLogger::new(&self.root)
    }
}

/// Streams per-step losses and per-epoch means to csv while training runs;
/// rows hit the disk at every epoch boundary, so an interrupted run keeps
/// its log up to the last finished epoch.
pub struct CsvLogger {
    losses: csv::Writer<File>,
    history: csv::Writer<File>,
}

impl CsvLogger {
    fn new(root: &Path) -> Result<Self> {
        let mut losses = csv::Writer::from_path(root.join("losses.csv"))?;
        losses.write_record(["epoch", "image_id", "level", "l_s", "l_c", "l_t", "joint"])?;
        let mut history = csv::Writer::from_path(root.join("history.csv"))?;
        history.write_record(["epoch", "train_joint", "val_joint"])?;
        Ok(Self { losses, history })
    }
}

impl TrainObserver for CsvLogger {
    fn on_step(
        &mut self,
        epoch: u32,
        image_id: &str,
        level: SupervisionLevel,
        loss: &LossBreakdown,
    ) {
        let l_s = loss.l_s.map(|v| v.to_string()).unwrap_or_default();
        let _ = self.losses.write_record([
            epoch.to_string(),
            image_id.to_string(),
            level.to_string(),
            l_s,
            loss.l_c.to_string(),
            loss.l_t.to_string(),
            loss.joint.to_string(),
        ]);
    }

    fn on_epoch(&mut self, row: &HistoryRow) {
        let _ = self.history.write_record([
            row.epoch.to_string(),
            row.train_joint.to_string(),
            row.val_joint.to_string(),
        ]);
        let _ = self.losses.flush();
        let _ = self.history.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logger_writes_both_csv_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), "seed = 1\n").unwrap();
        {
            let mut logger = run.logger().unwrap();
            let breakdown = LossBreakdown {
                l_s: None,
                l_c: 0.25,
                l_t: 0.5,
                joint: 0.75,
            };
            logger.on_step(0, "img0", SupervisionLevel::D2, &breakdown);
            logger.on_epoch(&HistoryRow {
                epoch: 0,
                train_joint: 0.75,
                val_joint: 0.8,
            });
        }
        let losses = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert!(losses.starts_with("epoch,image_id,level,l_s,l_c,l_t,joint"));
        assert!(losses.contains("0,img0,D2,,0.25,0.5,0.75"));
        let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(history.contains("0,0.75,0.8"));
        assert_eq!(
            fs::read_to_string(dir.path().join("config.snapshot")).unwrap(),
            "seed = 1\n"
        );
    }
}
