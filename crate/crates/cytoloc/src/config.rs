//! One TOML file configures everything: network, training, synthesis,
//! evaluation, and experiment layout. Every key has a default, so an empty
//! file (or no file at all) is a valid configuration, and any key can be
//! overridden from the command line with repeated `--set a.b.c=value` flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cytoloc_core::{EvalConfig, NetworkConfig, SynthConfig, TrainConfig};

use crate::experiment::ExperimentConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl AppConfig {
    /// Cross-section validation beyond what serde can express.
    pub fn validate(&self) -> Result<()> {
        self.network.validate().context("[network]")?;
        self.train.validate().context("[train]")?;
        self.synth.validate().context("[synth]")?;
        let e = &self.eval;
        if !(e.threshold > 0.0 && e.threshold < 1.0) {
            bail!("[eval] threshold must lie strictly between 0 and 1");
        }
        if !(e.dist_threshold > 0.0 && e.dist_threshold.is_finite()) {
            bail!("[eval] dist_threshold must be positive");
        }
        self.experiment.validate().context("[experiment]")?;
        Ok(())
    }

    /// The exact TOML persisted as `config.snapshot` in run directories.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads `path` (defaults apply when `None`) and applies `--set` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<AppConfig> {
    let text = match path {
        Some(p) => {
            fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => String::new(),
    };
    from_toml(&text, overrides)
}

/// Parses config text and applies dotted-key overrides before
/// deserialization, so overrides are type-checked exactly like file values.
pub fn from_toml(text: &str, overrides: &[String]) -> Result<AppConfig> {
    let mut table: toml::Table = text.parse().context("parsing config TOML")?;
    for entry in overrides {
        apply_override(&mut table, entry)?;
    }
    let config: AppConfig = toml::Value::Table(table)
        .try_into()
        .context("interpreting config")?;
    config.validate()?;
    Ok(config)
}

/// Applies one `section.key=value` override to the parsed tree. The value is
/// parsed as TOML; anything that does not parse (a bare word such as a
/// variant name) is taken as a string.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .with_context(|| format!("override `{entry}` is not of the form key=value"))?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override key `{path}` has an empty segment");
    }
    let value = parse_value(raw_value.trim());

    let mut node = table;
    for segment in &segments[..segments.len() - 1] {
        let slot = node
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = slot
            .as_table_mut()
            .with_context(|| format!("override key `{path}`: `{segment}` is not a table"))?;
    }
    node.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    // Parsing through a one-line document gives full TOML syntax for
    // arrays, floats, and booleans: `--set experiment.seeds=[0,1,2]`.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
