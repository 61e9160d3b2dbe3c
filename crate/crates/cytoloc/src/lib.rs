//! File formats, run-directory layout, and experiment orchestration around
//! [`cytoloc_core`].
//!
//! The core crate is pure computation; everything that touches the
//! filesystem lives here: TOML configuration with dotted-key overrides, PNG
//! and CSV dataset directories, binary network checkpoints, per-run loss and
//! history logs, metrics files, SVG plots, and the resumable p-percent sweep
//! that drives the comparison experiments. The `cytoloc` binary is a thin
//! clap front end over these modules.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod experiment;
pub mod metrics_io;
pub mod plots;
pub mod report;
pub mod rundir;

pub use config::AppConfig;
pub use experiment::ExperimentConfig;
pub use report::RunSummary;
