//! Wire format: one JSON envelope per line, UTF-8, over a bidirectional
//! byte stream. Payload objects serialize with sorted keys, so an envelope
//! has exactly one encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::alignment::{AlignmentConfig, StateId, StepSegmentation};
use crate::monitor::{Deviation, DeviationKind, MonitorConfig};
use crate::perception::{ObservationLiteral, SegmentDescriptor};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeType {
    Hello,
    SessionStart,
    Segment,
    Observations,
    Feedback,
    OperatorEvent,
    Error,
    SessionEnd,
    Ack,
}

impl EnvelopeType {
    /// Types a client may send.
    pub fn is_inbound(self) -> bool {
        matches!(
            self,
            EnvelopeType::Hello
                | EnvelopeType::SessionStart
                | EnvelopeType::Segment
                | EnvelopeType::OperatorEvent
                | EnvelopeType::SessionEnd
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: EnvelopeType,
    pub session_id: String,
    pub seq: u64,
    pub schema_version: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("unsupported schema_version {0:?}")]
    SchemaVersion(String),
}

pub fn decode_envelope(line: &str) -> Result<Envelope, WireError> {
    let env: Envelope = serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| WireError::Malformed(e.to_string()))?;
    if !env.payload.is_object() {
        return Err(WireError::Malformed("payload must be a JSON object".into()));
    }
    if env.schema_version != SCHEMA_VERSION {
        return Err(WireError::SchemaVersion(env.schema_version));
    }
    Ok(env)
}

impl Envelope {
    pub fn new(
        kind: EnvelopeType,
        session_id: impl Into<String>,
        seq: u64,
        payload: impl Serialize,
    ) -> Self {
        let payload = serde_json::to_value(payload).expect("payloads serialize to JSON");
        Self {
            kind,
            session_id: session_id.into(),
            seq,
            schema_version: SCHEMA_VERSION.into(),
            payload,
        }
    }

    /// The single-line wire encoding, without the trailing newline.
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("envelopes serialize to JSON")
    }

    pub fn payload_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| WireError::Malformed(format!("{:?} payload: {e}", self.kind)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloPayload {
    pub versions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfigs {
    pub alignment: AlignmentConfig,
    pub monitor: MonitorConfig,
    /// Also send each segment's observations back in an `observations` envelope.
    pub echo_observations: bool,
}

impl SessionConfigs {
    /// Reads a config file: optional `[alignment]` and `[monitor]` tables and
    /// an `echo_observations` flag. Missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        c.alignment.validate().map_err(|e| e.to_string())?;
        c.monitor.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionStartPayload {
    pub protocol_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<SessionConfigs>,
    /// Free-form operator metadata, copied into the session log header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participants: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPayload {
    pub descriptor: SegmentDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline_observations: Option<Vec<ObservationLiteral>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorEventKind {
    AcknowledgeDeviation,
    ForceAdvance,
    Pause,
    Resume,
    Note,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorEvent {
    pub t_ms: u64,
    pub kind: OperatorEventKind,
    /// Deviation id for `acknowledge_deviation`, step index for `force_advance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub segmentation: StepSegmentation,
    pub deviations: Vec<Deviation>,
    pub deviation_counts: BTreeMap<DeviationKind, usize>,
    pub observation_count: u64,
    pub quarantined_segments: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub t_ms: u64,
    pub current_step: StateId,
    pub step_name: String,
    /// Next expected action.
    pub guidance: String,
    pub deviations: Vec<Deviation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// True while an operator `force_advance` overrides the decoded step.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pinned: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub paused: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_summary: Option<SessionSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    ProtocolViolation,
    UnknownProtocolId,
    InvalidConfig,
    TraceUnavailable,
    SegmentRejected,
    BackendFailure,
    InvalidOperatorEvent,
    LogFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    /// The server closes the connection after a fatal error.
    pub fatal: bool,
}
