//! Run manifests and CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use guidelab::metrics::TimingReport;
use guidelab::{GaussianMixtureWorld, OpCounts, Point};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
/// Bumped whenever a CSV schema changes; columns are never reordered within a version.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell: String,
    pub chain_id: u64,
    pub t: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub name: String,
    pub op_counts: OpCounts,
    pub timing: TimingReport,
    pub metrics: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub status: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub defaults_applied: Vec<String>,
    pub csv_schema_version: u32,
    pub op_counts: OpCounts,
    pub cells: Vec<CellRecord>,
    pub metrics: BTreeMap<String, Value>,
    pub failures: Vec<FailureRecord>,
    /// Files produced by the run, relative to the run directory.
    pub outputs: Vec<String>,
}

/// Collects everything a manifest needs while a command runs.
#[derive(Debug)]
pub struct RunRecorder {
    pub dir: PathBuf,
    command: String,
    config: ExperimentConfig,
    defaults_applied: Vec<String>,
    started: DateTime<Utc>,
    pub cells: Vec<CellRecord>,
    pub metrics: BTreeMap<String, Value>,
    pub failures: Vec<FailureRecord>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    /// Creates the run directory and writes the config snapshot.
    pub fn start(dir: &Path, command: &str, config: &ExperimentConfig, defaults_applied: &[String]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        let partial = dir.join(MANIFEST_FILE);
        if partial.exists() {
            // a stale manifest must not describe this run if it crashes
            fs::remove_file(&partial)?;
        }
        let mut rec = Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
            defaults_applied: defaults_applied.to_vec(),
            started: Utc::now(),
            cells: Vec::new(),
            metrics: BTreeMap::new(),
            failures: Vec::new(),
            outputs: Vec::new(),
        };
        let snapshot = rec.dir.join(CONFIG_FILE);
        fs::write(&snapshot, config.to_toml())?;
        rec.record_output(&snapshot);
        Ok(rec)
    }

    pub fn record_output(&mut self, path: &Path) {
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Into<Value>) {
        self.metrics.insert(key.to_string(), value.into());
    }

    /// Writes the manifest last and atomically (temporary file, then rename).
    pub fn finish(self) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            if !p.exists() {
                bail!("output {} listed in the inventory does not exist", p.display());
            }
            let rel = p.strip_prefix(&self.dir).unwrap_or(p);
            outputs.push(rel.to_string_lossy().into_owned());
        }
        let manifest = RunManifest {
            command: self.command,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            status: "complete".into(),
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            config: self.config,
            defaults_applied: self.defaults_applied,
            csv_schema_version: CSV_SCHEMA_VERSION,
            op_counts: self.cells.iter().map(|c| c.op_counts).sum(),
            cells: self.cells,
            metrics: self.metrics,
            failures: self.failures,
            outputs,
        };
        write_atomic(&self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// `chain_id,x,y,label` for two-dimensional samples, otherwise
/// `chain_id,x1,..,xd,label`; the label is the most responsible component.
pub fn write_samples_csv(path: &Path, world: &GaussianMixtureWorld, samples: &[(u64, Point)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = world.dim();
    let mut header = vec!["chain_id".to_string()];
    if dim == 2 {
        header.extend(["x".to_string(), "y".to_string()]);
    } else {
        header.extend((1..=dim).map(|i| format!("x{i}")));
    }
    header.push("label".into());
    w.write_record(&header)?;
    for (id, p) in samples {
        let mut row = vec![id.to_string()];
        row.extend(p.iter().map(|v| v.to_string()));
        row.push(world.classify(p).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A simple table written with a fixed header.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Columns shared by `sample` and `sweep-km`.
pub const METRICS_HEADER: [&str; 7] = ["k", "m", "wall_seconds", "frechet", "consistency", "forward_calls", "backward_steps"];
