//! Append-only JSON-lines event log.
//!
//! Each line is one self-contained object
//! `{seq, session_id, event_type, actor, payload, timestamp}`. `seq` starts
//! at 1 and increases by one per session. The log is the source of truth for
//! adjudication state; see [`crate::adjudication::AdjudicationEngine::replay`].

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GraderId, SessionId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub session_id: SessionId,
    pub event_type: String,
    pub actor: GraderId,
    pub payload: serde_json::Value,
    pub timestamp: DateTime<Utc>,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::EventLog(e.to_string()))
    }
}

/// Source of event timestamps.
pub trait Clock {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock for headless runs: every call advances one second
/// from a fixed origin.
#[derive(Debug)]
pub struct LogicalClock {
    origin: DateTime<Utc>,
    ticks: AtomicI64,
}

impl LogicalClock {
    pub fn new(origin: DateTime<Utc>) -> Self {
        LogicalClock { origin, ticks: AtomicI64::new(0) }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        LogicalClock::new(Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap())
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.ticks.fetch_add(1, Ordering::Relaxed);
        self.origin + chrono::Duration::seconds(t)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<EventRecord>> {
    let file = File::open(path).map_err(|e| Error::EventLog(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::EventLog(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = EventRecord::from_line(&line)
            .map_err(|e| Error::EventLog(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_log(path: &Path, records: &[EventRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::EventLog(format!("{}: {e}", path.display())))
}

/// Appends records to a log file, flushing after each line.
#[derive(Debug)]
pub struct LogAppender {
    file: File,
}

impl LogAppender {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::EventLog(format!("{}: {e}", path.display())))?;
        Ok(LogAppender { file })
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<()> {
        let mut line = record.to_line();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::EventLog(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_has_fixed_field_order() {
        let clock = LogicalClock::default();
        let r = EventRecord {
            seq: 1,
            session_id: "dr:img1".into(),
            event_type: "session_opened".into(),
            actor: "system".into(),
            payload: serde_json::json!({"k": 1}),
            timestamp: clock.now(),
        };
        let line = r.to_line();
        assert!(line.starts_with(r#"{"seq":1,"session_id":"dr:img1","event_type":"session_opened","actor":"system""#));
        assert_eq!(EventRecord::from_line(&line).unwrap(), r);
        assert_eq!(clock.now() - r.timestamp, chrono::Duration::seconds(1));
    }
}
