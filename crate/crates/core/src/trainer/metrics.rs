use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

/// One metrics row. Update rows leave the evaluation-only fields empty and
/// vice versa.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// `update` or `eval`.
    pub kind: String,
    pub algo: String,
    pub env: String,
    pub seed: u64,
    pub iteration: u64,
    pub env_steps: u64,
    pub wall_clock: f64,
    pub mean_return: Option<f64>,
    pub episode_length: Option<f64>,
    pub final_distance: Option<f64>,
    pub mean_step_reward: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub drift_cost: Option<f64>,
    pub step_clip_frac: Option<f64>,
    pub path_clip_frac: Option<f64>,
    pub mean_abs_path_log_ratio: Option<f64>,
    pub actor_grad_norm: Option<f64>,
    pub learning_rate: Option<f64>,
    pub nonfinite_paths: Option<u64>,
    pub aborted_updates: Option<u64>,
    pub deterministic: Option<bool>,
}

pub const COLUMNS: [&str; 22] = [
    "kind",
    "algo",
    "env",
    "seed",
    "iteration",
    "env_steps",
    "wall_clock",
    "mean_return",
    "episode_length",
    "final_distance",
    "mean_step_reward",
    "policy_loss",
    "value_loss",
    "drift_cost",
    "step_clip_frac",
    "path_clip_frac",
    "mean_abs_path_log_ratio",
    "actor_grad_norm",
    "learning_rate",
    "nonfinite_paths",
    "aborted_updates",
    "deterministic",
];

impl MetricsRow {
    /// Same row with the wall-clock field blanked, for replay comparisons.
    pub fn without_clock(&self) -> Self {
        Self {
            wall_clock: 0.0,
            ..self.clone()
        }
    }
}

/// Appends rows to `metrics.csv` and `metrics.jsonl`.
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(dir: &Path) -> Result<Self> {
        let csv_path = dir.join("metrics.csv");
        let fresh = !csv_path.exists() || std::fs::metadata(&csv_path)?.len() == 0;
        let f = OpenOptions::new().create(true).append(true).open(&csv_path)?;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        if fresh {
            csv.write_record(COLUMNS)?;
        }
        let jsonl = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?,
        );
        Ok(Self { csv, jsonl })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.serialize(row)?;
        self.csv.flush()?;
        serde_json::to_writer(&mut self.jsonl, row)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        Ok(())
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}
