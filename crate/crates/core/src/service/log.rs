//! Append-only decision log: JSON lines, one file per UTC day.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::DateTime;
use serde::{Deserialize, Serialize};

use crate::corridor::{Observation, SpeedLimit};
use crate::error::{Error, Result};
use crate::guards::{Attribution, StageDecision};

/// One gantry's decision at one tick. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub tick_timestamp: i64,
    pub gantry_id: String,
    pub observation: Observation,
    pub policy_action: SpeedLimit,
    pub after_sm: SpeedLimit,
    pub after_mslc: SpeedLimit,
    #[serde(rename = "final")]
    pub final_limit: SpeedLimit,
    pub attribution: Attribution,
    /// The gantry's critical sensor reading was filled in.
    #[serde(default)]
    pub interpolated: bool,
    #[serde(default)]
    pub fail_safe: bool,
}

impl DecisionRecord {
    pub fn from_decision(tick_timestamp: i64, d: &StageDecision, interpolated: bool) -> Self {
        DecisionRecord {
            tick_timestamp,
            gantry_id: d.gantry_id.clone(),
            observation: d.observation,
            policy_action: d.policy_action,
            after_sm: d.after_sm,
            after_mslc: d.after_mslc,
            final_limit: d.final_limit,
            attribution: d.attribution,
            interpolated,
            fail_safe: d.fail_safe,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// A command the peer refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub tick_timestamp: i64,
    pub gantry_id: String,
    pub rejected: SpeedLimit,
    /// Limit retained in its place, if one had been posted before.
    pub retained: Option<SpeedLimit>,
    pub reason: String,
}

pub trait DecisionSink: Send {
    fn record(&mut self, record: &DecisionRecord) -> Result<()>;

    fn rejection(&mut self, _record: &RejectionRecord) -> Result<()> {
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Keeps records in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<DecisionRecord>>>,
    rejections: Arc<Mutex<Vec<RejectionRecord>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<DecisionRecord> {
        self.records.lock().expect("sink lock").clone()
    }

    pub fn rejections(&self) -> Vec<RejectionRecord> {
        self.rejections.lock().expect("sink lock").clone()
    }
}

impl DecisionSink for MemorySink {
    fn record(&mut self, record: &DecisionRecord) -> Result<()> {
        self.records.lock().expect("sink lock").push(record.clone());
        Ok(())
    }

    fn rejection(&mut self, record: &RejectionRecord) -> Result<()> {
        self.rejections.lock().expect("sink lock").push(record.clone());
        Ok(())
    }
}

/// Discards everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullSink;

impl DecisionSink for NullSink {
    fn record(&mut self, _record: &DecisionRecord) -> Result<()> {
        Ok(())
    }
}

fn day_of(timestamp: i64) -> String {
    DateTime::from_timestamp(timestamp, 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| "invalid-date".into())
}

/// Writes `decisions-YYYY-MM-DD.jsonl` (and `rejections-...` for refused
/// commands) under a directory, keyed by the UTC day of the tick timestamp.
pub struct RotatingJsonl {
    dir: PathBuf,
    decisions: Option<(String, BufWriter<File>)>,
    rejections: Option<(String, BufWriter<File>)>,
}

impl RotatingJsonl {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(RotatingJsonl {
            dir,
            decisions: None,
            rejections: None,
        })
    }

    fn writer<'a>(
        dir: &Path,
        slot: &'a mut Option<(String, BufWriter<File>)>,
        prefix: &str,
        timestamp: i64,
    ) -> Result<&'a mut BufWriter<File>> {
        let day = day_of(timestamp);
        if slot.as_ref().is_none_or(|(d, _)| *d != day) {
            if let Some((_, mut w)) = slot.take() {
                w.flush()?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{prefix}-{day}.jsonl")))?;
            *slot = Some((day, BufWriter::new(file)));
        }
        Ok(&mut slot.as_mut().expect("writer just opened").1)
    }
}

impl DecisionSink for RotatingJsonl {
    fn record(&mut self, record: &DecisionRecord) -> Result<()> {
        let w = Self::writer(&self.dir, &mut self.decisions, "decisions", record.tick_timestamp)?;
        writeln!(w, "{}", record.to_line())?;
        Ok(())
    }

    fn rejection(&mut self, record: &RejectionRecord) -> Result<()> {
        let w = Self::writer(&self.dir, &mut self.rejections, "rejections", record.tick_timestamp)?;
        writeln!(w, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for (_, w) in self.decisions.iter_mut().chain(self.rejections.iter_mut()) {
            w.flush()?;
        }
        Ok(())
    }
}

impl Drop for RotatingJsonl {
    fn drop(&mut self) {
        let _ = DecisionSink::flush(self);
    }
}

/// Reads one JSON-lines file, or every `decisions-*.jsonl` in a directory in
/// name (date) order.
pub fn read_decision_log(path: &Path) -> Result<Vec<DecisionRecord>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("decisions-") && n.ends_with(".jsonl"))
            })
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for f in files {
        let reader = BufReader::new(File::open(&f)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Schema {
                line: i as u64 + 1,
                message: format!("{}: {e}", f.display()),
            })?;
            out.push(rec);
        }
    }
    Ok(out)
}
