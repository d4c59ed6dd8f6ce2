//! Append-only JSON-lines training records.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub stage: String,
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub wall_ms: u64,
}

impl TelemetryRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.stage == other.stage
            && self.epoch == other.epoch
            && self.iteration == other.iteration
            && self.loss.to_bits() == other.loss.to_bits()
            && self.accuracy.map(f64::to_bits) == other.accuracy.map(f64::to_bits)
    }
}

pub struct Telemetry {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<TelemetryRecord>,
    start: Instant,
}

impl Telemetry {
    /// Records kept in memory only.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            records: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Append to `path`, creating it if needed.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path: Some(path),
            file: Some(file),
            records: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn log(&mut self, stage: &str, epoch: usize, iteration: usize, loss: f64, accuracy: Option<f64>) -> Result<()> {
        let rec = TelemetryRecord {
            stage: stage.to_string(),
            epoch,
            iteration,
            loss,
            accuracy,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        if let (Some(f), Some(p)) = (self.file.as_mut(), self.path.as_ref()) {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(p, e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[TelemetryRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TelemetryRecord> {
        self.records
    }
}

pub fn read_telemetry(path: impl AsRef<Path>) -> Result<Vec<TelemetryRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Metadata {
            path: path.into(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_one_line_per_record() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("t.jsonl");
        let mut t = Telemetry::to_file(&p).unwrap();
        t.log("pretrain", 0, 0, 1.5, None).unwrap();
        t.log("finetune", 1, 7, 0.25, Some(0.5)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.lines().next().unwrap().contains("accuracy"));
        let back = read_telemetry(&p).unwrap();
        assert!(back.iter().zip(t.records()).all(|(a, b)| a.same_values(b)));
    }
}
