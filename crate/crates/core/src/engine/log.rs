//! Structured training log: one JSON line per epoch behind a versioned
//! header line. Every field except `wall_time_s` is a pure function of
//! (config, seed, data); [`RunLog::canonical_jsonl`] zeroes the wall times
//! so determinism checks can compare logs byte for byte.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const RUN_LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    pub log_version: u32,
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Per-epoch summary. `lr` and `tau` are the schedule values applied at the
/// epoch's final step, so tests can check them against the closed forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps_done: usize,
    pub mean_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rankme: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_f2_ciw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_f1_normal: Option<f64>,
    /// Wall-clock seconds for the epoch (training plus evaluation). The one
    /// field that is not reproducible across runs.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn new(header: RunHeader) -> RunLog {
        RunLog { header, records: Vec::new() }
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// The log with every wall time replaced by zero. Two runs of the same
    /// recipe and seed must produce byte-identical canonical forms.
    pub fn canonical_jsonl(&self) -> String {
        let mut copy = self.clone();
        for r in &mut copy.records {
            r.wall_time_s = 0.0;
        }
        copy.to_jsonl()
    }

    pub fn from_jsonl(text: &str) -> Result<RunLog> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| CoreError::invalid("run log", "empty log"))?;
        let header: RunHeader = serde_json::from_str(head)
            .map_err(|e| CoreError::invalid("run log", format!("bad header line: {e}")))?;
        if header.log_version != RUN_LOG_VERSION {
            return Err(CoreError::invalid(
                "run log",
                format!("log version {} (expected {RUN_LOG_VERSION})", header.log_version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let rec: EpochRecord = serde_json::from_str(line).map_err(|e| {
                CoreError::invalid("run log", format!("bad record on line {}: {e}", i + 2))
            })?;
            records.push(rec);
        }
        Ok(RunLog { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunLog> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        RunLog::from_jsonl(&text)
    }
}
