//! Experiment reports, CSV rows and output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::metrics::StorageAccount;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub per_task_scores: Vec<f64>,
    pub reference_scores: Vec<f64>,
    pub normalized_score: f64,
    /// Number of distinct merged models built during inference.
    pub merged_models: usize,
    pub routing_accuracy: Option<f64>,
    pub wall_time_secs: f64,
    pub config: serde_json::Value,
    pub storage: Option<StorageAccount>,
}

impl ExperimentReport {
    /// Same scores, ignoring wall time and echo.
    pub fn same_scores(&self, other: &ExperimentReport) -> bool {
        self.per_task_scores == other.per_task_scores && self.normalized_score == other.normalized_score
    }
}

/// One CSV line: `experiment,knob,seed,method,task,score`. Per-task rows
/// carry the task index and accuracy; the summary row carries
/// `task = "summary"` and the normalized score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment: String,
    pub knob: String,
    pub seed: u64,
    pub method: String,
    pub task: String,
    pub score: f64,
}

impl CsvRow {
    pub fn summary(experiment: &str, knob: &str, seed: u64, method: &str, normalized: f64) -> CsvRow {
        CsvRow {
            experiment: experiment.into(),
            knob: knob.into(),
            seed,
            method: method.into(),
            task: "summary".into(),
            score: normalized,
        }
    }

    pub fn is_summary(&self) -> bool {
        self.task == "summary"
    }
}

/// Per-task rows followed by the summary row.
pub fn rows_for(experiment: &str, knob: &str, seed: u64, method: &str, scores: &[f64], normalized: f64) -> Vec<CsvRow> {
    let mut rows: Vec<CsvRow> = scores
        .iter()
        .enumerate()
        .map(|(t, &s)| CsvRow {
            experiment: experiment.into(),
            knob: knob.into(),
            seed,
            method: method.into(),
            task: t.to_string(),
            score: s,
        })
        .collect();
    rows.push(CsvRow::summary(experiment, knob, seed, method, normalized));
    rows
}

pub fn write_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Mean summary score per (knob, method) over seeds, in first-seen order.
pub fn seed_means(rows: &[CsvRow]) -> Vec<(String, String, f64)> {
    let mut out: Vec<(String, String, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.is_summary()) {
        match out.iter_mut().find(|(k, m, _, _)| *k == r.knob && *m == r.method) {
            Some(e) => {
                e.2 += r.score;
                e.3 += 1;
            }
            None => out.push((r.knob.clone(), r.method.clone(), r.score, 1)),
        }
    }
    out.into_iter().map(|(k, m, s, n)| (k, m, s / n as f64)).collect()
}

/// Hex SHA-256 prefix of the canonical JSON form of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let v = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let bytes = serde_json::to_vec(&v).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(&digest[..6]))
}

/// `root/<config hash>`, created if missing.
pub fn output_dir<T: Serialize>(root: &Path, config: &T) -> Result<PathBuf> {
    let dir = root.join(config_hash(config)?);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schema_and_roundtrip() {
        let rows = rows_for("sweep", "0.9", 3, "svd", &[0.8, 0.75], 91.5);
        let s = csv_string(&rows).unwrap();
        assert!(s.starts_with("experiment,knob,seed,method,task,score\n"));
        assert!(s.contains("sweep,0.9,3,svd,summary,91.5"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_csv(&rows, &p).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
    }

    #[test]
    fn seed_means_average_summaries() {
        let mut rows = rows_for("e", "k", 0, "m", &[1.0], 90.0);
        rows.extend(rows_for("e", "k", 1, "m", &[1.0], 94.0));
        rows.extend(rows_for("e", "k", 0, "n", &[1.0], 50.0));
        let means = seed_means(&rows);
        assert_eq!(means[0], ("k".into(), "m".into(), 92.0));
        assert_eq!(means[1], ("k".into(), "n".into(), 50.0));
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&serde_json::json!({"b": 1, "a": 2})).unwrap();
        let b = config_hash(&serde_json::json!({"a": 2, "b": 1})).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
    }
}
