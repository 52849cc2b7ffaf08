use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    expected_frame_count, Observation, ObservationLiteral, PerceptionBackend, SegmentDescriptor,
    SegmentError, SegmentRef,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub seq_no: u64,
    pub expected_frames: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub ack: SubmissionAck,
    pub warnings: Vec<String>,
    /// Backend (or inline) output, ordered by `t_ms`.
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("session {0:?} not found")]
    SessionNotFound(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(#[from] SegmentError),
    #[error("segment belongs to session {found:?}, submitted to {expected:?}")]
    SessionMismatch { expected: String, found: String },
    #[error("segment seq_no {seq_no} does not follow {last}")]
    OutOfOrderSegment { seq_no: u64, last: u64 },
    #[error(
        "segment starting at {t_start_ms} ms overlaps previous segment ending at {prev_end_ms} ms"
    )]
    OverlappingSegment { t_start_ms: u64, prev_end_ms: u64 },
    #[error("perception failed on segment {seq_no} (quarantined): {message}")]
    BackendFailure { seq_no: u64, message: String },
}

struct Intake {
    backend: Arc<dyn PerceptionBackend>,
    last: Option<(u64, u64)>,
    quarantined: Vec<u64>,
}

/// Routes segments to each session's backend and enforces stream order.
///
/// Submissions for one session must be serialized by the caller (`&mut self`
/// does this within a process); distinct gateways are independent.
#[derive(Default)]
pub struct Gateway {
    sessions: HashMap<String, Intake>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_session(
        &mut self,
        session_id: impl Into<String>,
        backend: Arc<dyn PerceptionBackend>,
    ) {
        self.sessions.insert(
            session_id.into(),
            Intake {
                backend,
                last: None,
                quarantined: Vec::new(),
            },
        );
    }

    pub fn close_session(&mut self, session_id: &str) -> bool {
        self.sessions.remove(session_id).is_some()
    }

    pub fn quarantined(&self, session_id: &str) -> Option<&[u64]> {
        self.sessions
            .get(session_id)
            .map(|s| s.quarantined.as_slice())
    }

    /// Records the segment and runs perception on it. `inline` observations,
    /// when given, replace the backend call.
    ///
    /// A segment that passes the ordering checks is consumed even if
    /// perception then fails: its seq_no is quarantined and the session stays
    /// open.
    pub fn submit_segment(
        &mut self,
        session_id: &str,
        segment: &SegmentDescriptor,
        inline: Option<Vec<ObservationLiteral>>,
    ) -> Result<Submission, GatewayError> {
        let intake = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| GatewayError::SessionNotFound(session_id.to_string()))?;

        if segment.session_id != session_id {
            return Err(GatewayError::SessionMismatch {
                expected: session_id.to_string(),
                found: segment.session_id.clone(),
            });
        }
        let warnings = segment.check()?;
        if let Some((last_seq, last_end)) = intake.last {
            if segment.seq_no <= last_seq {
                return Err(GatewayError::OutOfOrderSegment {
                    seq_no: segment.seq_no,
                    last: last_seq,
                });
            }
            if segment.t_start_ms < last_end {
                return Err(GatewayError::OverlappingSegment {
                    t_start_ms: segment.t_start_ms,
                    prev_end_ms: last_end,
                });
            }
        }
        intake.last = Some((segment.seq_no, segment.t_end_ms));

        let produced = match inline {
            Some(lits) => {
                let seg_ref = SegmentRef {
                    session_id: session_id.to_string(),
                    seq_no: segment.seq_no,
                };
                Ok(lits.into_iter().map(|l| l.bind(seg_ref.clone())).collect())
            }
            None => intake.backend.observe(segment).map_err(|e| e.0),
        };
        let observations = produced.and_then(|obs| check_observations(segment, obs));

        match observations {
            Ok(observations) => Ok(Submission {
                ack: SubmissionAck {
                    seq_no: segment.seq_no,
                    expected_frames: expected_frame_count(segment),
                },
                warnings,
                observations,
            }),
            Err(message) => {
                intake.quarantined.push(segment.seq_no);
                Err(GatewayError::BackendFailure {
                    seq_no: segment.seq_no,
                    message,
                })
            }
        }
    }
}

fn check_observations(
    segment: &SegmentDescriptor,
    obs: Vec<Observation>,
) -> Result<Vec<Observation>, String> {
    for (k, o) in obs.iter().enumerate() {
        if o.segment.seq_no != segment.seq_no || o.segment.session_id != segment.session_id {
            return Err(format!("observation {k} is bound to a different segment"));
        }
        if !segment.contains(o.t_ms) {
            return Err(format!(
                "observation {k} at {} ms outside segment [{}, {}]",
                o.t_ms, segment.t_start_ms, segment.t_end_ms
            ));
        }
        if !(0.0..=1.0).contains(&o.confidence) {
            return Err(format!(
                "observation {k} confidence {} outside [0, 1]",
                o.confidence
            ));
        }
        if k > 0 && o.t_ms < obs[k - 1].t_ms {
            return Err(format!("observation {k} is out of t_ms order"));
        }
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{parse_trace, BackendError, BackendInfo, NullBackend, OracleBackend};

    struct Failing;

    impl PerceptionBackend for Failing {
        fn info(&self) -> BackendInfo {
            BackendInfo {
                name: "failing".into(),
                version: "0".into(),
            }
        }
        fn observe(&self, _: &SegmentDescriptor) -> Result<Vec<Observation>, BackendError> {
            Err(BackendError("model offline".into()))
        }
    }

    fn gateway_with(backend: Arc<dyn PerceptionBackend>) -> Gateway {
        let mut g = Gateway::new();
        g.open_session("s1", backend);
        g
    }

    #[test]
    fn first_segment_acked_with_frame_count() {
        let trace = parse_trace(
            "{\"header\":{\"protocol_id\":\"p\"}}\n{\"seq_no\":0,\"observations\":[{\"t_ms\":2500,\"action_label\":\"a\",\"confidence\":0.9}]}\n",
        )
        .unwrap();
        let mut g = gateway_with(Arc::new(OracleBackend::new(trace)));
        let sub = g
            .submit_segment("s1", &SegmentDescriptor::new("s1", 0, 0, 5_000), None)
            .unwrap();
        assert_eq!(
            sub.ack,
            SubmissionAck {
                seq_no: 0,
                expected_frames: 20
            }
        );
        assert_eq!(sub.observations.len(), 1);
    }

    #[test]
    fn repeated_seq_no_is_out_of_order() {
        let mut g = gateway_with(Arc::new(NullBackend));
        g.submit_segment("s1", &SegmentDescriptor::new("s1", 0, 0, 5_000), None)
            .unwrap();
        let e = g
            .submit_segment("s1", &SegmentDescriptor::new("s1", 0, 5_000, 10_000), None)
            .unwrap_err();
        assert_eq!(e, GatewayError::OutOfOrderSegment { seq_no: 0, last: 0 });
    }

    #[test]
    fn overlap_rejected_gap_allowed() {
        let mut g = gateway_with(Arc::new(NullBackend));
        g.submit_segment("s1", &SegmentDescriptor::new("s1", 0, 0, 5_000), None)
            .unwrap();
        let e = g
            .submit_segment("s1", &SegmentDescriptor::new("s1", 1, 4_000, 9_000), None)
            .unwrap_err();
        assert!(matches!(
            e,
            GatewayError::OverlappingSegment {
                prev_end_ms: 5_000,
                ..
            }
        ));
        g.submit_segment("s1", &SegmentDescriptor::new("s1", 5, 20_000, 25_000), None)
            .unwrap();
    }

    #[test]
    fn unknown_session() {
        let mut g = Gateway::new();
        let e = g
            .submit_segment("nope", &SegmentDescriptor::new("nope", 0, 0, 5_000), None)
            .unwrap_err();
        assert!(matches!(e, GatewayError::SessionNotFound(_)));
    }

    #[test]
    fn backend_failure_quarantines_and_keeps_session_open() {
        let mut g = gateway_with(Arc::new(Failing));
        let e = g
            .submit_segment("s1", &SegmentDescriptor::new("s1", 0, 0, 5_000), None)
            .unwrap_err();
        assert!(matches!(e, GatewayError::BackendFailure { seq_no: 0, .. }));
        assert_eq!(g.quarantined("s1"), Some(&[0u64][..]));
        let inline = vec![ObservationLiteral::new(6_000, "a", 0.5)];
        let sub = g
            .submit_segment(
                "s1",
                &SegmentDescriptor::new("s1", 1, 5_000, 10_000),
                Some(inline),
            )
            .unwrap();
        assert_eq!(sub.observations[0].segment.seq_no, 1);
    }

    #[test]
    fn inline_observations_are_checked() {
        let mut g = gateway_with(Arc::new(NullBackend));
        let inline = vec![
            ObservationLiteral::new(3_000, "a", 0.5),
            ObservationLiteral::new(1_000, "a", 0.5),
        ];
        let e = g
            .submit_segment(
                "s1",
                &SegmentDescriptor::new("s1", 0, 0, 5_000),
                Some(inline),
            )
            .unwrap_err();
        assert!(matches!(e, GatewayError::BackendFailure { .. }));
    }
}
