//! On-disk layout of an experiment directory.
//!
//! ```text
//! <out>/experiment.toml          normalized config
//! <out>/runs.csv                 one line per trained run
//! <out>/runs/<run>/manifest.toml
//! <out>/runs/<run>/loss.csv
//! <out>/runs/<run>/checkpoint/   parameter dumps
//! <out>/runs/<run>/analysis/     written by `analyze`
//! <out>/comparison.csv, quant.csv, theory/
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ModelSection, TrainSection};

pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const RUNS_DIR: &str = "runs";
pub const RUN_INDEX: &str = "runs.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ANALYSIS_DIR: &str = "analysis";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const QUANT_FILE: &str = "quant.csv";
pub const THEORY_DIR: &str = "theory";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: String,
    pub seed: u64,
    /// Position of the variant in the configured matrix.
    pub variant_index: usize,
    pub variant: String,
    pub param_hash: String,
    pub eval_sequences: usize,
    pub metrics: FinalMetrics,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing run manifest")?;
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Directory name such as `s3-softmax1-aos`.
pub fn run_name(seed: u64, variant_label: &str) -> String {
    format!("s{seed}-{}", variant_label.replace('/', "-"))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn loss_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(s, "{i},{l:.16e}").unwrap();
    }
    s
}

/// Run directories under `<out>/runs`, sorted by name.
pub fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(out.join(RUNS_DIR)) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    dirs
}
