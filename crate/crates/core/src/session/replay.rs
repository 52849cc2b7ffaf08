use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::envelope::Envelope;
use super::log::{
    parse_session_log, LogError, LogFactory, MemoryLogFactory, RecordKind, SessionLog,
};
use super::service::{BackendResolver, ProtocolRegistry, ServiceContext, SessionService};
use crate::perception::{
    BackendError, BackendInfo, Observation, PerceptionBackend, SegmentDescriptor,
};
use crate::protocol::{parse_protocol, Protocol};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Corrupt(#[from] LogError),
    #[error("embedded protocol hashes to {actual}, header says {expected}")]
    ProtocolHashMismatch { expected: String, actual: String },
    #[error("embedded protocol document: {0}")]
    BadProtocol(String),
    #[error("record {record}: {message}")]
    BadRecord { record: u64, message: String },
    #[error("replay diverged at outbound envelope {index}: logged {logged}, replayed {replayed}")]
    Diverged {
        index: usize,
        logged: String,
        replayed: String,
    },
    #[error("replayed log differs from the original at line {line}")]
    LogDiverged { line: usize },
}

#[derive(Debug, Clone)]
pub struct ReplayOutput {
    /// Outbound envelopes in order, re-derived from the logged inputs.
    pub outbound: Vec<Envelope>,
    /// The session log the replay itself produced.
    pub log_text: String,
}

impl ReplayOutput {
    pub fn lines(&self) -> Vec<String> {
        self.outbound.iter().map(Envelope::encode).collect()
    }
}

/// Backend that answers from what a session log recorded.
struct LoggedBackend {
    info: BackendInfo,
    observations: BTreeMap<u64, Vec<Observation>>,
    failures: BTreeMap<u64, String>,
}

impl PerceptionBackend for LoggedBackend {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn observe(&self, segment: &SegmentDescriptor) -> Result<Vec<Observation>, BackendError> {
        if let Some(m) = self.failures.get(&segment.seq_no) {
            return Err(BackendError(m.clone()));
        }
        Ok(self
            .observations
            .get(&segment.seq_no)
            .cloned()
            .unwrap_or_default())
    }
}

struct LoggedResolver(Arc<LoggedBackend>);

impl BackendResolver for LoggedResolver {
    fn resolve(&self, _: &Protocol, _: Option<&str>) -> Result<Arc<dyn PerceptionBackend>, String> {
        Ok(Arc::clone(&self.0) as Arc<dyn PerceptionBackend>)
    }
}

pub fn replay_text(text: &str) -> Result<ReplayOutput, ReplayError> {
    let log = parse_session_log(text)?;
    let out = replay_session(&log)?;
    let original: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let replayed: Vec<&str> = out.log_text.lines().collect();
    if let Some(line) =
        (0..original.len().max(replayed.len())).find(|&k| original.get(k) != replayed.get(k))
    {
        return Err(ReplayError::LogDiverged { line: line + 1 });
    }
    Ok(out)
}

/// Re-runs a logged session through a fresh service and checks that every
/// outbound envelope comes out identical.
pub fn replay_session(log: &SessionLog) -> Result<ReplayOutput, ReplayError> {
    let h = &log.header;
    let actual = hex::encode(Sha256::digest(h.protocol_document.as_bytes()));
    if actual != h.protocol_hash {
        return Err(ReplayError::ProtocolHashMismatch {
            expected: h.protocol_hash.clone(),
            actual,
        });
    }
    let protocol = parse_protocol(&h.protocol_document)
        .map_err(|e| ReplayError::BadProtocol(e.to_string()))?;
    if protocol.id != h.protocol_id {
        return Err(ReplayError::BadProtocol(format!(
            "document id {:?} does not match header id {:?}",
            protocol.id, h.protocol_id
        )));
    }

    let bad = |record: u64, e: serde_json::Error| ReplayError::BadRecord {
        record,
        message: e.to_string(),
    };
    let mut backend = LoggedBackend {
        info: h.backend.clone(),
        observations: BTreeMap::new(),
        failures: BTreeMap::new(),
    };
    let mut inbound = Vec::new();
    let mut logged_out = Vec::new();
    for r in &log.records {
        match r.kind {
            RecordKind::Observation => {
                let o: Observation =
                    serde_json::from_value(r.data.clone()).map_err(|e| bad(r.i, e))?;
                backend
                    .observations
                    .entry(o.segment.seq_no)
                    .or_default()
                    .push(o);
            }
            RecordKind::BackendFailure => {
                #[derive(serde::Deserialize)]
                struct F {
                    seq_no: u64,
                    message: String,
                }
                let f: F = serde_json::from_value(r.data.clone()).map_err(|e| bad(r.i, e))?;
                backend.failures.insert(f.seq_no, f.message);
            }
            RecordKind::Inbound => {
                inbound.push(
                    serde_json::from_value::<Envelope>(r.data.clone()).map_err(|e| bad(r.i, e))?,
                );
            }
            RecordKind::Outbound => {
                logged_out.push(
                    serde_json::from_value::<Envelope>(r.data.clone()).map_err(|e| bad(r.i, e))?,
                );
            }
            _ => {}
        }
    }

    let mut registry = ProtocolRegistry::new();
    registry.insert(protocol);
    let logs = MemoryLogFactory::default();
    let started = h.started_at_unix_ms;
    let mut ctx = ServiceContext::new(
        registry,
        Arc::new(LoggedResolver(Arc::new(backend))),
        Arc::new(logs.clone()) as Arc<dyn LogFactory>,
    );
    ctx.defaults = h.configs;
    ctx.clock = Arc::new(move || started);

    let mut svc = SessionService::after_handshake(ctx);
    let mut outbound = Vec::new();
    for env in inbound {
        outbound.extend(svc.handle_envelope(env));
    }
    if svc.state() == super::service::ConnectionState::InSession {
        svc.disconnect();
    }

    for (index, pair) in logged_out.iter().zip(&outbound).enumerate() {
        if pair.0 != pair.1 {
            return Err(ReplayError::Diverged {
                index,
                logged: pair.0.encode(),
                replayed: pair.1.encode(),
            });
        }
    }
    if logged_out.len() != outbound.len() {
        let index = logged_out.len().min(outbound.len());
        let show = |v: &[Envelope]| v.get(index).map_or("nothing".to_string(), Envelope::encode);
        return Err(ReplayError::Diverged {
            index,
            logged: show(&logged_out),
            replayed: show(&outbound),
        });
    }
    Ok(ReplayOutput {
        outbound,
        log_text: logs.text(&h.session_id).unwrap_or_default(),
    })
}
