//! Append-only session logs.
//!
//! NDJSON: a `{"log_header": {...}}` line, then one record per line, closed by
//! an `end` record carrying the record count. Records are totally ordered by
//! `(t_ms, i)` where `i` is the arrival index and `t_ms` never decreases.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::envelope::{Envelope, SessionConfigs};
use crate::perception::BackendInfo;

pub const LOG_FORMAT: &str = "benchmate-session-log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format: String,
    pub schema_version: String,
    pub session_id: String,
    pub protocol_id: String,
    pub protocol_version: String,
    /// Hex SHA-256 of `protocol_document`.
    pub protocol_hash: String,
    /// Canonical protocol document, so the log replays without outside files.
    pub protocol_document: String,
    pub configs: SessionConfigs,
    pub backend: BackendInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participants: Option<Value>,
    /// Wall clock at session start. The only non-deterministic field.
    pub started_at_unix_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Inbound,
    Outbound,
    Observation,
    Alignment,
    BackendFailure,
    Note,
    Pin,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub i: u64,
    pub t_ms: u64,
    pub kind: RecordKind,
    pub data: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    log_header: LogHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: LogHeader,
    pub records: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogError {
    #[error("corrupt log ({reason}); last valid record: {}", last_valid_record.map_or("none".to_string(), |i| i.to_string()))]
    CorruptLog {
        last_valid_record: Option<u64>,
        reason: String,
    },
}

fn corrupt(last: Option<u64>, reason: impl Into<String>) -> LogError {
    LogError::CorruptLog {
        last_valid_record: last,
        reason: reason.into(),
    }
}

pub fn parse_session_log(text: &str) -> Result<SessionLog, LogError> {
    let mut lines = text.split_inclusive('\n');
    let first = lines.next().ok_or_else(|| corrupt(None, "empty log"))?;
    if !first.ends_with('\n') {
        return Err(corrupt(None, "header line is truncated"));
    }
    let header: HeaderLine =
        serde_json::from_str(first).map_err(|e| corrupt(None, format!("bad header: {e}")))?;
    if header.log_header.format != LOG_FORMAT {
        return Err(corrupt(
            None,
            format!("unknown log format {:?}", header.log_header.format),
        ));
    }

    let mut records: Vec<LogRecord> = Vec::new();
    let mut ended = false;
    for line in lines {
        let last = records.last().map(|r| r.i);
        if ended {
            return Err(corrupt(last, "records after the end record"));
        }
        if !line.ends_with('\n') {
            return Err(corrupt(last, "final line is truncated"));
        }
        let record: LogRecord = serde_json::from_str(line)
            .map_err(|e| corrupt(last, format!("unparseable record: {e}")))?;
        let expected_i = records.len() as u64;
        if record.i != expected_i {
            return Err(corrupt(
                last,
                format!("record index {} where {expected_i} expected", record.i),
            ));
        }
        if let Some(prev) = records.last() {
            if record.t_ms < prev.t_ms {
                return Err(corrupt(
                    last,
                    format!("record {} goes back in time", record.i),
                ));
            }
        }
        if record.kind == RecordKind::End {
            let count = record.data.get("records").and_then(Value::as_u64);
            if count != Some(record.i) {
                return Err(corrupt(last, "end record count does not match"));
            }
            ended = true;
        }
        records.push(record);
    }
    if !ended {
        return Err(corrupt(records.last().map(|r| r.i), "missing end record"));
    }
    Ok(SessionLog {
        header: header.log_header,
        records,
    })
}

impl SessionLog {
    pub fn envelopes(
        &self,
        kind: RecordKind,
    ) -> impl Iterator<Item = Result<Envelope, serde_json::Error>> + '_ {
        self.records
            .iter()
            .filter(move |r| r.kind == kind)
            .map(|r| serde_json::from_value(r.data.clone()))
    }
}

/// Destination for log lines. `append` must not return before the line is
/// durable enough for the caller to release the matching outbound message.
pub trait LogSink: Send {
    fn append(&mut self, line: &str) -> io::Result<()>;
}

/// Creates one sink per session.
pub trait LogFactory: Send + Sync {
    fn open(&self, session_id: &str) -> io::Result<Box<dyn LogSink>>;
}

pub struct FileSink {
    out: BufWriter<File>,
}

impl FileSink {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create_new(true).write(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl LogSink for FileSink {
    fn append(&mut self, line: &str) -> io::Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Writes `<dir>/<session_id>.ndjson`; refuses to overwrite.
pub struct DirLogFactory {
    dir: PathBuf,
}

impl DirLogFactory {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.ndjson"))
    }
}

impl LogFactory for DirLogFactory {
    fn open(&self, session_id: &str) -> io::Result<Box<dyn LogSink>> {
        if session_id.is_empty()
            || !session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || session_id.starts_with('.')
        {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("session id {session_id:?} is not usable as a file name"),
            ));
        }
        Ok(Box::new(FileSink::create(&self.path_for(session_id))?))
    }
}

/// Shared in-memory log lines, for tests and replay.
#[derive(Clone, Default)]
pub struct MemorySink {
    lines: Arc<Mutex<Vec<String>>>,
}

impl MemorySink {
    pub fn text(&self) -> String {
        let lines = self.lines.lock().expect("log lock");
        let mut out = String::new();
        for l in lines.iter() {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

impl LogSink for MemorySink {
    fn append(&mut self, line: &str) -> io::Result<()> {
        self.lines.lock().expect("log lock").push(line.to_string());
        Ok(())
    }
}

#[derive(Clone, Default)]
pub struct MemoryLogFactory {
    sinks: Arc<Mutex<HashMap<String, MemorySink>>>,
}

impl MemoryLogFactory {
    pub fn text(&self, session_id: &str) -> Option<String> {
        self.sinks
            .lock()
            .expect("log lock")
            .get(session_id)
            .map(MemorySink::text)
    }
}

impl LogFactory for MemoryLogFactory {
    fn open(&self, session_id: &str) -> io::Result<Box<dyn LogSink>> {
        let sink = MemorySink::default();
        self.sinks
            .lock()
            .expect("log lock")
            .insert(session_id.to_string(), sink.clone());
        Ok(Box::new(sink))
    }
}

/// Serializes records onto a sink, keeping indices and the clock monotone.
pub struct LogWriter {
    sink: Box<dyn LogSink>,
    next_i: u64,
    clock_ms: u64,
}

impl LogWriter {
    pub fn start(mut sink: Box<dyn LogSink>, header: &LogHeader) -> io::Result<Self> {
        let line = serde_json::to_string(&HeaderLine {
            log_header: header.clone(),
        })
        .map_err(io::Error::other)?;
        sink.append(&line)?;
        Ok(Self {
            sink,
            next_i: 0,
            clock_ms: 0,
        })
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    /// Appends a record stamped `max(clock, t_ms)`.
    pub fn append(&mut self, kind: RecordKind, t_ms: u64, data: impl Serialize) -> io::Result<()> {
        self.clock_ms = self.clock_ms.max(t_ms);
        let record = LogRecord {
            i: self.next_i,
            t_ms: self.clock_ms,
            kind,
            data: serde_json::to_value(data).map_err(io::Error::other)?,
        };
        let line = serde_json::to_string(&record).map_err(io::Error::other)?;
        self.sink.append(&line)?;
        self.next_i += 1;
        Ok(())
    }

    pub fn close(mut self) -> io::Result<()> {
        let n = self.next_i;
        self.append(RecordKind::End, 0, serde_json::json!({ "records": n }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::envelope::SessionConfigs;

    fn header() -> LogHeader {
        LogHeader {
            format: LOG_FORMAT.into(),
            schema_version: "1".into(),
            session_id: "s".into(),
            protocol_id: "p".into(),
            protocol_version: "1".into(),
            protocol_hash: "00".into(),
            protocol_document: String::new(),
            configs: SessionConfigs::default(),
            backend: BackendInfo {
                name: "null".into(),
                version: "1".into(),
            },
            trace_ref: None,
            participants: None,
            started_at_unix_ms: 0,
        }
    }

    fn sample() -> String {
        let sink = MemorySink::default();
        let mut w = LogWriter::start(Box::new(sink.clone()), &header()).unwrap();
        w.append(RecordKind::Note, 100, "a").unwrap();
        w.append(RecordKind::Note, 50, "b").unwrap();
        w.append(RecordKind::Note, 300, "c").unwrap();
        w.close().unwrap();
        sink.text()
    }

    #[test]
    fn clock_never_goes_back() {
        let log = parse_session_log(&sample()).unwrap();
        let times: Vec<_> = log.records.iter().map(|r| r.t_ms).collect();
        assert_eq!(times, [100, 100, 300, 300]);
        assert_eq!(log.records.last().unwrap().kind, RecordKind::End);
    }

    #[test]
    fn truncation_reports_last_valid_record() {
        let text = sample();
        let cut = &text[..text.len() - 10];
        match parse_session_log(cut) {
            Err(LogError::CorruptLog {
                last_valid_record, ..
            }) => assert_eq!(last_valid_record, Some(2)),
            other => panic!("{other:?}"),
        }
        // Cut exactly at a line boundary: no end record.
        let lines: Vec<&str> = text.lines().collect();
        let boundary = lines[..3].join("\n") + "\n";
        match parse_session_log(&boundary) {
            Err(LogError::CorruptLog {
                last_valid_record, ..
            }) => assert_eq!(last_valid_record, Some(1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_factory_refuses_odd_names_and_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let f = DirLogFactory::new(dir.path()).unwrap();
        assert!(f.open("../escape").is_err());
        assert!(f.open("ok-1").is_ok());
        assert!(f.open("ok-1").is_err());
    }
}
