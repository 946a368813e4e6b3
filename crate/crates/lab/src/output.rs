//! Tidy CSV rows and the JSON run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};

pub const CSV_HEADER: [&str; 9] = ["experiment", "agent", "env", "param_name", "param_value", "seed", "episode", "metric", "value"];

const NA: &str = "NA";

/// One long-form observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub agent: String,
    pub env: String,
    pub param_name: Option<String>,
    pub param_value: Option<String>,
    pub seed: Option<u64>,
    pub episode: Option<usize>,
    pub metric: String,
    pub value: Option<f64>,
}

impl Row {
    pub fn new(experiment: &str, agent: &str, env: &str, metric: &str, value: Option<f64>) -> Self {
        Self {
            experiment: experiment.into(),
            agent: agent.into(),
            env: env.into(),
            param_name: None,
            param_value: None,
            seed: None,
            episode: None,
            metric: metric.into(),
            value,
        }
    }

    pub fn param(mut self, name: &str, value: impl ToString) -> Self {
        self.param_name = Some(name.into());
        self.param_value = Some(value.to_string());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn episode(mut self, episode: usize) -> Self {
        self.episode = Some(episode);
        self
    }

    fn fields(&self) -> [String; 9] {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| NA.into());
        [
            self.experiment.clone(),
            self.agent.clone(),
            self.env.clone(),
            opt(&self.param_name),
            opt(&self.param_value),
            self.seed.map_or_else(|| NA.into(), |s| s.to_string()),
            self.episode.map_or_else(|| NA.into(), |e| e.to_string()),
            self.metric.clone(),
            self.value.map_or_else(|| NA.into(), format_value),
        ]
    }
}

/// Shortest round-trip decimal; non-finite values become `NA`.
fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        NA.into()
    }
}

pub fn csv_bytes(rows: &[Row]) -> LabResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.into_inner().map_err(|e| LabError::Csv(e.into_error().into()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskTiming {
    pub task: usize,
    pub agent: String,
    pub param: String,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool_version: &'static str,
    pub command: String,
    pub experiment: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub csv_file: String,
    pub csv_sha256: String,
    pub rows: usize,
    pub total_seconds: f64,
    pub tasks: Vec<TaskTiming>,
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct Written {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub csv_sha256: String,
}

pub fn write_outputs(dir: &Path, stem: &str, rows: &[Row], mut manifest: Manifest) -> LabResult<Written> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let bytes = csv_bytes(rows)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, &bytes).map_err(|e| LabError::io(&csv_path, e))?;
    manifest.csv_file = csv_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.csv_sha256 = sha256_hex(&bytes);
    manifest.rows = rows.len();
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| LabError::Config(e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| LabError::io(&manifest_path, e))?;
    Ok(Written { csv: csv_path, manifest: manifest_path, csv_sha256: manifest.csv_sha256 })
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(config).unwrap_or_default().as_bytes())
}
