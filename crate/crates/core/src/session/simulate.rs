use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use super::envelope::{
    Envelope, EnvelopeType, ErrorCode, ErrorPayload, HelloPayload, SegmentPayload, SessionConfigs,
    SessionStartPayload, SCHEMA_VERSION,
};
use super::log::{LogFactory, MemoryLogFactory};
use super::service::{
    BackendResolver, ProtocolRegistry, ServiceContext, SessionService, WallClock,
};
use crate::perception::{
    OracleBackend, PerceptionBackend, SegmentDescriptor, TraceFile, NOMINAL_SEGMENT_MS,
};
use crate::protocol::Protocol;

/// Name the simulated session uses for its trace.
pub const SIMULATED_TRACE_REF: &str = "simulated-trace";

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("trace was recorded for protocol {trace:?}, not {protocol:?}")]
    ProtocolMismatch { trace: String, protocol: String },
    #[error("session failed: {0:?}")]
    Session(ErrorPayload),
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub outbound: Vec<Envelope>,
    pub log_text: String,
}

/// One segment per trace record. Records without bounds get back-to-back
/// slots of the nominal segment length.
pub fn segments_for(trace: &TraceFile, session_id: &str) -> Vec<SegmentDescriptor> {
    let slot = NOMINAL_SEGMENT_MS.0;
    let mut prev_end = 0;
    trace
        .records
        .iter()
        .map(|r| {
            let start = r.t_start_ms.unwrap_or(if r.t_end_ms.is_some() {
                r.t_end_ms.unwrap_or(0).saturating_sub(slot).max(prev_end)
            } else {
                prev_end
            });
            let end = r.t_end_ms.unwrap_or(start + slot);
            prev_end = end;
            SegmentDescriptor::new(session_id, r.seq_no, start, end)
        })
        .collect()
}

struct Fixed(Arc<OracleBackend>);

impl BackendResolver for Fixed {
    fn resolve(&self, _: &Protocol, _: Option<&str>) -> Result<Arc<dyn PerceptionBackend>, String> {
        Ok(Arc::clone(&self.0) as Arc<dyn PerceptionBackend>)
    }
}

/// Drives a full client conversation for `trace` against a fresh service:
/// handshake, session start, one segment per record, session end.
pub fn simulate(
    protocol: Protocol,
    trace: TraceFile,
    configs: SessionConfigs,
    session_id: &str,
    clock: WallClock,
) -> Result<Simulation, SimulateError> {
    if trace.header.protocol_id != protocol.id {
        return Err(SimulateError::ProtocolMismatch {
            trace: trace.header.protocol_id.clone(),
            protocol: protocol.id.clone(),
        });
    }
    let segments = segments_for(&trace, session_id);
    let protocol_id = protocol.id.clone();
    let mut registry = ProtocolRegistry::new();
    registry.insert(protocol);
    let logs = MemoryLogFactory::default();
    let mut ctx = ServiceContext::new(
        registry,
        Arc::new(Fixed(Arc::new(OracleBackend::new(trace)))),
        Arc::new(logs.clone()) as Arc<dyn LogFactory>,
    );
    ctx.clock = clock;

    let mut svc = SessionService::new(ctx);
    let mut inbound = vec![
        Envelope::new(
            EnvelopeType::Hello,
            "",
            0,
            HelloPayload {
                versions: vec![SCHEMA_VERSION.into()],
            },
        ),
        Envelope::new(
            EnvelopeType::SessionStart,
            session_id,
            1,
            SessionStartPayload {
                protocol_id,
                trace_ref: Some(SIMULATED_TRACE_REF.into()),
                configs: Some(configs),
                participants: None,
            },
        ),
    ];
    for (k, descriptor) in segments.into_iter().enumerate() {
        inbound.push(Envelope::new(
            EnvelopeType::Segment,
            session_id,
            2 + k as u64,
            SegmentPayload {
                descriptor,
                inline_observations: None,
            },
        ));
    }
    inbound.push(Envelope::new(
        EnvelopeType::SessionEnd,
        session_id,
        inbound.len() as u64,
        json!({}),
    ));

    let mut outbound = Vec::new();
    for env in inbound {
        let out = svc.handle_envelope(env);
        for e in &out {
            if e.kind == EnvelopeType::Error {
                let p: ErrorPayload = e.payload_as().expect("service emits well-formed errors");
                // Rejected segments are part of the simulated outcome; anything
                // that prevents the session from running is not.
                let setup = matches!(
                    p.code,
                    ErrorCode::UnknownProtocolId
                        | ErrorCode::TraceUnavailable
                        | ErrorCode::InvalidConfig
                        | ErrorCode::LogFailure
                );
                if p.fatal || setup {
                    return Err(SimulateError::Session(p));
                }
            }
        }
        outbound.extend(out);
    }
    Ok(Simulation {
        outbound,
        log_text: logs.text(session_id).unwrap_or_default(),
    })
}
