//! Trace files: newline-delimited JSON, a `{"header": {...}}` line followed by
//! one `{"seq_no": n, "observations": [...]}` record per line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BackendError, BackendInfo, Observation, ObservationLiteral, PerceptionBackend,
    SegmentDescriptor, SegmentRef,
};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub protocol_id: String,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub seq_no: u64,
    /// Optional segment bounds. When absent, drivers that synthesize
    /// segments from a trace fall back to fixed-length slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_start_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end_ms: Option<u64>,
    pub observations: Vec<ObservationLiteral>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace observation at {t_ms} ms lies outside segment {seq_no} [{t_start_ms}, {t_end_ms}]")]
pub struct TraceBoundsError {
    pub seq_no: u64,
    pub t_ms: u64,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: TraceHeader,
}

#[derive(Serialize)]
struct HeaderLineRef<'a> {
    header: &'a TraceHeader,
}

pub fn parse_trace(text: &str) -> Result<TraceFile, TraceError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let err = |line, message: String| TraceError { line, message };

    let (line_no, first) = lines
        .next()
        .ok_or_else(|| err(1, "empty trace: missing header line".into()))?;
    let header: HeaderLine =
        serde_json::from_str(first).map_err(|e| err(line_no, format!("bad header: {e}")))?;

    let mut records: Vec<TraceRecord> = Vec::new();
    for (line_no, line) in lines {
        let record: TraceRecord =
            serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        if let Some(prev) = records.last() {
            if record.seq_no <= prev.seq_no {
                return Err(err(
                    line_no,
                    format!("seq_no {} does not follow {}", record.seq_no, prev.seq_no),
                ));
            }
        }
        if let (Some(a), Some(b)) = (record.t_start_ms, record.t_end_ms) {
            if b <= a {
                return Err(err(
                    line_no,
                    format!("t_end_ms {b} is not after t_start_ms {a}"),
                ));
            }
        }
        for (k, o) in record.observations.iter().enumerate() {
            if !(0.0..=1.0).contains(&o.confidence) {
                return Err(err(
                    line_no,
                    format!(
                        "observations[{k}].confidence {} outside [0, 1]",
                        o.confidence
                    ),
                ));
            }
            if k > 0 && o.t_ms < record.observations[k - 1].t_ms {
                return Err(err(
                    line_no,
                    format!("observations[{k}] not sorted by t_ms"),
                ));
            }
        }
        records.push(record);
    }

    Ok(TraceFile {
        header: header.header,
        records,
    })
}

impl TraceFile {
    pub fn record(&self, seq_no: u64) -> Option<&TraceRecord> {
        self.records
            .binary_search_by_key(&seq_no, |r| r.seq_no)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLineRef {
            header: &self.header,
        })
        .expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Returns exactly the trace's observations for `segment.seq_no`, bound to the
/// segment. A missing record yields no observations.
pub fn oracle_observe(
    segment: &SegmentDescriptor,
    trace: &TraceFile,
) -> Result<Vec<Observation>, TraceBoundsError> {
    let Some(record) = trace.record(segment.seq_no) else {
        return Ok(Vec::new());
    };
    record
        .observations
        .iter()
        .map(|lit| {
            if !segment.contains(lit.t_ms) {
                return Err(TraceBoundsError {
                    seq_no: segment.seq_no,
                    t_ms: lit.t_ms,
                    t_start_ms: segment.t_start_ms,
                    t_end_ms: segment.t_end_ms,
                });
            }
            Ok(lit.clone().bind(SegmentRef {
                session_id: segment.session_id.clone(),
                seq_no: segment.seq_no,
            }))
        })
        .collect()
}

/// Deterministic backend replaying a recorded trace.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    trace: TraceFile,
}

impl OracleBackend {
    pub fn new(trace: TraceFile) -> Self {
        Self { trace }
    }

    pub fn trace(&self) -> &TraceFile {
        &self.trace
    }
}

impl PerceptionBackend for OracleBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "trace-oracle".into(),
            version: "1".into(),
        }
    }

    fn observe(&self, segment: &SegmentDescriptor) -> Result<Vec<Observation>, BackendError> {
        oracle_observe(segment, &self.trace).map_err(|e| BackendError(e.to_string()))
    }
}
