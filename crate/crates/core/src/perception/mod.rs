//! Perception boundary: segment descriptors in, [`Observation`]s out.
//!
//! Raw video never crosses this boundary. A [`PerceptionBackend`] turns a
//! segment descriptor into observations; [`OracleBackend`] replays a recorded
//! trace file and is what desk-scale runs and tests use.

mod gateway;
mod trace;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gateway::{Gateway, GatewayError, Submission, SubmissionAck};
pub use trace::{
    oracle_observe, parse_trace, OracleBackend, TraceBoundsError, TraceError, TraceFile,
    TraceHeader, TraceRecord,
};

pub const DEFAULT_FPS: u32 = 4;
/// Segments shorter or longer than this window are accepted with a warning.
pub const NOMINAL_SEGMENT_MS: (u64, u64) = (5_000, 10_000);
/// Segments longer than this are rejected outright.
pub const MAX_SEGMENT_MS: u64 = 60_000;

fn default_fps() -> u32 {
    DEFAULT_FPS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDescriptor {
    pub session_id: String,
    pub seq_no: u64,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    #[serde(default = "default_fps")]
    pub fps: u32,
    /// Opaque URI or trace key. Never decoded by the engine.
    #[serde(default)]
    pub payload_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("segment end {t_end_ms} ms is not after start {t_start_ms} ms")]
    EmptySpan { t_start_ms: u64, t_end_ms: u64 },
    #[error("segment lasts {0} ms, longer than the {MAX_SEGMENT_MS} ms limit")]
    TooLong(u64),
    #[error("frame rate must be positive")]
    ZeroFps,
}

impl SegmentDescriptor {
    pub fn new(session_id: impl Into<String>, seq_no: u64, t_start_ms: u64, t_end_ms: u64) -> Self {
        Self {
            session_id: session_id.into(),
            seq_no,
            t_start_ms,
            t_end_ms,
            fps: DEFAULT_FPS,
            payload_ref: String::new(),
        }
    }

    pub fn duration_ms(&self) -> u64 {
        self.t_end_ms.saturating_sub(self.t_start_ms)
    }

    /// Checks the descriptor invariants. On success returns warnings, e.g. a
    /// duration outside the nominal 5 to 10 s window.
    pub fn check(&self) -> Result<Vec<String>, SegmentError> {
        if self.t_end_ms <= self.t_start_ms {
            return Err(SegmentError::EmptySpan {
                t_start_ms: self.t_start_ms,
                t_end_ms: self.t_end_ms,
            });
        }
        if self.fps == 0 {
            return Err(SegmentError::ZeroFps);
        }
        let d = self.duration_ms();
        if d > MAX_SEGMENT_MS {
            return Err(SegmentError::TooLong(d));
        }
        let (lo, hi) = NOMINAL_SEGMENT_MS;
        if d < lo || d > hi {
            Ok(vec![format!(
                "segment {} lasts {d} ms, outside the nominal {lo}-{hi} ms window",
                self.seq_no
            )])
        } else {
            Ok(Vec::new())
        }
    }

    pub fn contains(&self, t_ms: u64) -> bool {
        self.t_start_ms <= t_ms && t_ms <= self.t_end_ms
    }
}

/// Frames the backend is expected to sample from a segment:
/// `ceil(duration_ms * fps / 1000)`.
pub fn expected_frame_count(s: &SegmentDescriptor) -> u64 {
    let frames_ms = s.duration_ms() * u64::from(s.fps);
    frames_ms.div_ceil(1000)
}

/// Closed event vocabulary emitted by perception.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    GloveRemoved,
    NonSterileContact,
    Spill,
    TimerStarted,
    TimerStopped,
}

impl Event {
    pub fn breaks_sterility(self) -> bool {
        matches!(self, Event::GloveRemoved | Event::NonSterileContact)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredParameter {
    pub name: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRef {
    pub session_id: String,
    pub seq_no: u64,
}

/// What perception saw, before it is bound to a segment. This is the shape of
/// observations in trace files and inline segment payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationLiteral {
    pub t_ms: u64,
    pub action_label: String,
    pub confidence: f64,
    #[serde(default)]
    pub detected_materials: Vec<String>,
    #[serde(default)]
    pub measured_parameters: Vec<MeasuredParameter>,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl ObservationLiteral {
    pub fn new(t_ms: u64, action_label: impl Into<String>, confidence: f64) -> Self {
        Self {
            t_ms,
            action_label: action_label.into(),
            confidence,
            detected_materials: Vec::new(),
            measured_parameters: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn bind(self, segment: SegmentRef) -> Observation {
        Observation {
            segment,
            t_ms: self.t_ms,
            action_label: self.action_label,
            confidence: self.confidence,
            detected_materials: self.detected_materials,
            measured_parameters: self.measured_parameters,
            events: self.events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub segment: SegmentRef,
    pub t_ms: u64,
    pub action_label: String,
    pub confidence: f64,
    #[serde(default)]
    pub detected_materials: Vec<String>,
    #[serde(default)]
    pub measured_parameters: Vec<MeasuredParameter>,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl Observation {
    pub fn is_unknown(&self) -> bool {
        self.action_label == crate::protocol::UNKNOWN_LABEL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct BackendError(pub String);

/// Converts one video segment into observations ordered by `t_ms`.
///
/// Implementations are called at most once at a time per session but may be
/// shared across sessions.
pub trait PerceptionBackend: Send + Sync {
    fn info(&self) -> BackendInfo;
    fn observe(&self, segment: &SegmentDescriptor) -> Result<Vec<Observation>, BackendError>;
}

/// Backend that never sees anything. Used when a session has no trace and the
/// client sends observations inline.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullBackend;

impl PerceptionBackend for NullBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "null".into(),
            version: "1".into(),
        }
    }

    fn observe(&self, _segment: &SegmentDescriptor) -> Result<Vec<Observation>, BackendError> {
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: u64, end: u64) -> SegmentDescriptor {
        SegmentDescriptor::new("s", 0, start, end)
    }

    #[test]
    fn frame_count_at_four_fps() {
        assert_eq!(expected_frame_count(&seg(0, 5_000)), 20);
        assert_eq!(expected_frame_count(&seg(0, 7_500)), 30);
        assert_eq!(expected_frame_count(&seg(0, 10_000)), 40);
        assert_eq!(expected_frame_count(&seg(1_000, 1_001)), 1);
    }

    #[test]
    fn zero_length_segment_rejected() {
        assert!(matches!(
            seg(5, 5).check(),
            Err(SegmentError::EmptySpan { .. })
        ));
        assert!(matches!(
            seg(0, 60_001).check(),
            Err(SegmentError::TooLong(_))
        ));
        assert_eq!(seg(0, 60_000).check().unwrap().len(), 1);
        assert!(seg(0, 5_000).check().unwrap().is_empty());
    }

    #[test]
    fn fps_defaults_to_four() {
        let s: SegmentDescriptor =
            serde_json::from_str(r#"{"session_id":"a","seq_no":1,"t_start_ms":0,"t_end_ms":5000}"#)
                .unwrap();
        assert_eq!(s.fps, 4);
    }

    #[test]
    fn unknown_event_is_rejected() {
        let r: Result<Event, _> = serde_json::from_str(r#""explosion""#);
        assert!(r.is_err());
        let e: Event = serde_json::from_str(r#""non_sterile_contact""#).unwrap();
        assert!(e.breaks_sterility());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn frame_count_composes_like_ceil(d1 in 1u64..60_000, d2 in 1u64..60_000) {
                let f = |d| expected_frame_count(&seg(0, d));
                let whole = f(d1 + d2);
                prop_assert!(whole == f(d1) + f(d2) || whole + 1 == f(d1) + f(d2));
                prop_assert!(f(d1) <= f(d1 + d2));
            }
        }
    }
}
