//! Settings file support.
//!
//! The file is TOML. Top-level keys apply to every subcommand; a table named
//! after the subcommand (`[train]`, `[inspect-k]`, ...) overrides them for
//! that subcommand only. Keys are flag names with `-` or `_`. Explicit
//! command-line flags win over both.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct Settings {
    pub task: Option<String>,
    pub featurizer_dim: Option<usize>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub k: Option<usize>,
    pub items: Option<usize>,
    pub annotations: Option<usize>,
    pub rates: Option<String>,
    pub dim: Option<usize>,
    pub rationale_dim: Option<usize>,
    pub separation: Option<f64>,
    pub rationale_noise: Option<f64>,
    pub embedding_noise: Option<f64>,
    pub mixed_prob: Option<f64>,
    pub latent_scale: Option<f64>,

    pub test_fraction: Option<f64>,
    pub train_out: Option<PathBuf>,
    pub test_out: Option<PathBuf>,

    pub mode: Option<String>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,

    pub variant: Option<String>,
    pub clusters: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub hidden: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub sharpness: Option<f64>,
    pub full_batch: Option<bool>,
    pub log: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub eval_every: Option<usize>,

    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub dump_calibration: Option<PathBuf>,

    pub draws: Option<usize>,
    pub step: Option<f64>,
    pub tolerance: Option<f64>,
    pub batch: Option<usize>,

    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
}

const SUBCOMMANDS: [&str; 7] = ["synth", "split", "cluster", "train", "eval", "gradcheck", "inspect-k"];

fn normalize(table: toml::Table) -> toml::Table {
    table.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()
}

/// Reads `path` and returns the settings that apply to `subcommand`.
pub fn load(path: &Path, subcommand: &str) -> Result<Settings> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let mut merged = toml::Table::new();
    let mut section = None;
    for (key, value) in table {
        match value {
            toml::Value::Table(t) if SUBCOMMANDS.contains(&key.as_str()) => {
                if key == subcommand {
                    section = Some(t);
                }
            }
            toml::Value::Table(_) => anyhow::bail!("config {}: unknown section [{key}]", path.display()),
            v => {
                merged.insert(key, v);
            }
        }
    }
    let mut merged = normalize(merged);
    if let Some(t) = section {
        merged.extend(normalize(t));
    }
    Settings::deserialize(toml::Value::Table(merged)).with_context(|| format!("config {}", path.display()))
}
