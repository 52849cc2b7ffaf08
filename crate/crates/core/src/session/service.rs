use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use super::envelope::{
    decode_envelope, Envelope, EnvelopeType, ErrorCode, ErrorPayload, FeedbackMessage,
    HelloPayload, OperatorEvent, OperatorEventKind, SegmentPayload, SessionConfigs,
    SessionStartPayload, SessionSummary, SCHEMA_VERSION,
};
use super::log::{LogFactory, LogHeader, LogWriter, RecordKind, LOG_FORMAT};
use crate::alignment::{AlignmentState, StateId, StepSegmentation};
use crate::monitor::{Deviation, DeviationMonitor};
use crate::perception::{
    parse_trace, Gateway, GatewayError, NullBackend, OracleBackend, PerceptionBackend,
};
use crate::protocol::{parse_protocol, protocol_hash, to_document, Protocol, ProtocolError};

/// Protocols a service can open sessions against, keyed by id.
#[derive(Debug, Default, Clone)]
pub struct ProtocolRegistry {
    by_id: BTreeMap<String, Arc<Protocol>>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: ProtocolError,
    },
    #[error("protocol id {id:?} defined twice ({path})")]
    Duplicate { id: String, path: PathBuf },
}

impl ProtocolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Protocol) -> Arc<Protocol> {
        let p = Arc::new(p);
        self.by_id.insert(p.id.clone(), Arc::clone(&p));
        p
    }

    pub fn get(&self, id: &str) -> Option<&Arc<Protocol>> {
        self.by_id.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.by_id.keys().map(String::as_str)
    }

    /// Loads every `*.toml` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RegistryError::Io { path, source }
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        let mut reg = Self::new();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let p = parse_protocol(&text).map_err(|source| RegistryError::Parse {
                path: path.clone(),
                source,
            })?;
            if reg.by_id.contains_key(&p.id) {
                return Err(RegistryError::Duplicate { id: p.id, path });
            }
            reg.insert(p);
        }
        Ok(reg)
    }
}

/// Picks the perception backend for a new session.
pub trait BackendResolver: Send + Sync {
    fn resolve(
        &self,
        protocol: &Protocol,
        trace_ref: Option<&str>,
    ) -> Result<Arc<dyn PerceptionBackend>, String>;
}

/// Serves `trace_ref` from trace files in a directory; sessions without a
/// trace get a backend that observes nothing (clients send inline
/// observations instead).
#[derive(Debug, Clone, Default)]
pub struct TraceDirResolver {
    dir: Option<PathBuf>,
}

impl TraceDirResolver {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir }
    }
}

impl BackendResolver for TraceDirResolver {
    fn resolve(
        &self,
        protocol: &Protocol,
        trace_ref: Option<&str>,
    ) -> Result<Arc<dyn PerceptionBackend>, String> {
        let Some(name) = trace_ref else {
            return Ok(Arc::new(NullBackend));
        };
        let Some(dir) = &self.dir else {
            return Err("this server has no trace directory".into());
        };
        let plain = Path::new(name)
            .file_name()
            .is_some_and(|f| f == name && !name.starts_with('.'));
        if !plain {
            return Err(format!("trace_ref {name:?} must be a plain file name"));
        }
        let text = fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let trace = parse_trace(&text).map_err(|e| format!("{name}: {e}"))?;
        if trace.header.protocol_id != protocol.id {
            return Err(format!(
                "{name} was recorded for protocol {:?}, not {:?}",
                trace.header.protocol_id, protocol.id
            ));
        }
        Ok(Arc::new(OracleBackend::new(trace)))
    }
}

pub type WallClock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> WallClock {
    Arc::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    })
}

/// Everything sessions share. Cheap to clone; one per server.
#[derive(Clone)]
pub struct ServiceContext {
    pub protocols: Arc<ProtocolRegistry>,
    pub backends: Arc<dyn BackendResolver>,
    pub logs: Arc<dyn LogFactory>,
    pub defaults: SessionConfigs,
    pub clock: WallClock,
}

impl ServiceContext {
    pub fn new(
        protocols: ProtocolRegistry,
        backends: Arc<dyn BackendResolver>,
        logs: Arc<dyn LogFactory>,
    ) -> Self {
        Self {
            protocols: Arc::new(protocols),
            backends,
            logs,
            defaults: SessionConfigs::default(),
            clock: system_clock(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    AwaitingHello,
    Ready,
    InSession,
    Closed,
}

struct ActiveSession {
    id: String,
    protocol: Arc<Protocol>,
    configs: SessionConfigs,
    gateway: Gateway,
    engine: AlignmentState,
    monitor: DeviationMonitor,
    log: LogWriter,
    deviations: Vec<Deviation>,
    acknowledged: BTreeSet<u64>,
    pinned: Option<usize>,
    paused: bool,
    last_step: Option<usize>,
    last_end_ms: u64,
    out_seq: u64,
}

enum Failure {
    /// Error envelope, connection stays open.
    Soft(ErrorCode, String),
    /// Error envelope, then the connection closes.
    Fatal(ErrorCode, String),
}

fn violation(msg: impl Into<String>) -> Failure {
    Failure::Fatal(ErrorCode::ProtocolViolation, msg.into())
}

fn log_failure(e: io::Error) -> Failure {
    Failure::Fatal(
        ErrorCode::LogFailure,
        format!("session log write failed: {e}"),
    )
}

/// One client connection: the handshake, at most one open session at a time,
/// and the per-segment pipeline. Inbound envelopes are handled strictly in
/// order; every envelope of an open session is logged before its response is
/// returned.
pub struct SessionService {
    ctx: ServiceContext,
    state: ConnectionState,
    in_seq: Option<u64>,
    conn_out_seq: u64,
    session: Option<ActiveSession>,
}

impl SessionService {
    pub fn new(ctx: ServiceContext) -> Self {
        Self {
            ctx,
            state: ConnectionState::AwaitingHello,
            in_seq: None,
            conn_out_seq: 0,
            session: None,
        }
    }

    /// A service that has already completed the handshake. Replay starts here.
    pub fn after_handshake(ctx: ServiceContext) -> Self {
        Self {
            state: ConnectionState::Ready,
            ..Self::new(ctx)
        }
    }

    pub fn state(&self) -> ConnectionState {
        self.state
    }

    pub fn is_closed(&self) -> bool {
        self.state == ConnectionState::Closed
    }

    /// Decodes and handles one wire line.
    pub fn handle_line(&mut self, line: &str) -> Vec<Envelope> {
        match decode_envelope(line) {
            Ok(env) => self.handle_envelope(env),
            Err(e) => {
                let mut out = Vec::new();
                self.fail(violation(e.to_string()), &mut out);
                out
            }
        }
    }

    pub fn handle_envelope(&mut self, env: Envelope) -> Vec<Envelope> {
        let mut out = Vec::new();
        if self.is_closed() {
            return out;
        }
        if let Some(session) = self.session.as_mut() {
            if let Err(e) = session.log.append(RecordKind::Inbound, 0, &env) {
                self.fail(log_failure(e), &mut out);
                return out;
            }
        }
        if let Err(f) = self.dispatch(env, &mut out) {
            self.fail(f, &mut out);
        }
        out
    }

    /// Ends an open session after the transport went away. The log is closed
    /// without a summary.
    pub fn disconnect(&mut self) {
        if let Some(mut s) = self.session.take() {
            let _ = s
                .log
                .append(RecordKind::Note, 0, json!({ "note": "connection closed" }));
            let _ = s.log.close();
        }
        self.state = ConnectionState::Closed;
    }

    fn dispatch(&mut self, env: Envelope, out: &mut Vec<Envelope>) -> Result<(), Failure> {
        if !env.kind.is_inbound() {
            return Err(violation(format!(
                "{:?} envelopes are server-to-client only",
                env.kind
            )));
        }
        if let Some(prev) = self.in_seq {
            if env.seq <= prev {
                return Err(violation(format!("seq {} does not follow {prev}", env.seq)));
            }
        }
        self.in_seq = Some(env.seq);
        if let Some(s) = &self.session {
            if env.session_id != s.id {
                return Err(violation(format!(
                    "envelope for session {:?} while {:?} is open",
                    env.session_id, s.id
                )));
            }
        }

        match (self.state, env.kind) {
            (ConnectionState::AwaitingHello, EnvelopeType::Hello) => self.on_hello(&env, out),
            (ConnectionState::Ready, EnvelopeType::SessionStart) => {
                self.on_session_start(&env, out)
            }
            (ConnectionState::InSession, EnvelopeType::Segment) => self.on_segment(&env, out),
            (ConnectionState::InSession, EnvelopeType::OperatorEvent) => {
                self.on_operator_event(&env, out)
            }
            (ConnectionState::InSession, EnvelopeType::SessionEnd) => {
                self.on_session_end(&env, out)
            }
            (state, kind) => Err(violation(format!(
                "{kind:?} not allowed in state {state:?}"
            ))),
        }
    }

    fn emit(
        &mut self,
        kind: EnvelopeType,
        payload: impl serde::Serialize,
        out: &mut Vec<Envelope>,
    ) -> Result<(), Failure> {
        match self.session.as_mut() {
            Some(s) => {
                let env = Envelope::new(kind, s.id.clone(), s.out_seq, payload);
                s.out_seq += 1;
                s.log
                    .append(RecordKind::Outbound, 0, &env)
                    .map_err(log_failure)?;
                out.push(env);
            }
            None => {
                let env = Envelope::new(kind, "", self.conn_out_seq, payload);
                self.conn_out_seq += 1;
                out.push(env);
            }
        }
        Ok(())
    }

    fn fail(&mut self, failure: Failure, out: &mut Vec<Envelope>) {
        let (code, message, fatal) = match failure {
            Failure::Soft(c, m) => (c, m, false),
            Failure::Fatal(c, m) => (c, m, true),
        };
        let payload = ErrorPayload {
            code,
            message,
            fatal,
        };
        if self.emit(EnvelopeType::Error, &payload, out).is_err() {
            // The log is gone; still tell the client, then drop the session.
            out.push(Envelope::new(
                EnvelopeType::Error,
                "",
                self.conn_out_seq,
                &payload,
            ));
            self.conn_out_seq += 1;
            self.session = None;
            self.state = ConnectionState::Closed;
            return;
        }
        if fatal {
            if let Some(s) = self.session.take() {
                let _ = s.log.close();
            }
            self.state = ConnectionState::Closed;
        }
    }

    fn on_hello(&mut self, env: &Envelope, out: &mut Vec<Envelope>) -> Result<(), Failure> {
        let hello: HelloPayload = env.payload_as().map_err(|e| violation(e.to_string()))?;
        if !hello.versions.iter().any(|v| v == SCHEMA_VERSION) {
            return Err(violation(format!(
                "no common schema version; server speaks {SCHEMA_VERSION:?}, client offered {:?}",
                hello.versions
            )));
        }
        self.state = ConnectionState::Ready;
        self.emit(EnvelopeType::Ack, json!({ "version": SCHEMA_VERSION }), out)
    }

    fn on_session_start(&mut self, env: &Envelope, out: &mut Vec<Envelope>) -> Result<(), Failure> {
        let start: SessionStartPayload = env.payload_as().map_err(|e| violation(e.to_string()))?;
        if env.session_id.is_empty() {
            return Err(violation("session_start needs a session_id"));
        }
        let protocol = self
            .ctx
            .protocols
            .get(&start.protocol_id)
            .cloned()
            .ok_or_else(|| {
                Failure::Soft(
                    ErrorCode::UnknownProtocolId,
                    format!("no protocol with id {:?}", start.protocol_id),
                )
            })?;
        let configs = start.configs.unwrap_or(self.ctx.defaults);
        configs
            .alignment
            .validate()
            .map_err(|e| Failure::Soft(ErrorCode::InvalidConfig, e.to_string()))?;
        configs
            .monitor
            .validate()
            .map_err(|e| Failure::Soft(ErrorCode::InvalidConfig, e.to_string()))?;
        let backend = self
            .ctx
            .backends
            .resolve(&protocol, start.trace_ref.as_deref())
            .map_err(|e| Failure::Soft(ErrorCode::TraceUnavailable, e))?;

        let document = to_document(&protocol);
        let header = LogHeader {
            format: LOG_FORMAT.into(),
            schema_version: SCHEMA_VERSION.into(),
            session_id: env.session_id.clone(),
            protocol_id: protocol.id.clone(),
            protocol_version: protocol.version.clone(),
            protocol_hash: protocol_hash(&protocol),
            protocol_document: document,
            configs,
            backend: backend.info(),
            trace_ref: start.trace_ref.clone(),
            participants: start.participants.clone(),
            started_at_unix_ms: (self.ctx.clock)(),
        };
        let sink = self.ctx.logs.open(&env.session_id).map_err(|e| {
            Failure::Soft(
                ErrorCode::LogFailure,
                format!("cannot open session log: {e}"),
            )
        })?;
        let mut log = LogWriter::start(sink, &header).map_err(|e| {
            Failure::Soft(
                ErrorCode::LogFailure,
                format!("cannot write session log: {e}"),
            )
        })?;
        log.append(RecordKind::Inbound, 0, env)
            .map_err(log_failure)?;

        let mut gateway = Gateway::new();
        gateway.open_session(env.session_id.clone(), Arc::clone(&backend));
        self.session = Some(ActiveSession {
            id: env.session_id.clone(),
            engine: AlignmentState::new(Arc::clone(&protocol), configs.alignment),
            monitor: DeviationMonitor::new(Arc::clone(&protocol), configs.monitor),
            protocol,
            configs,
            gateway,
            log,
            deviations: Vec::new(),
            acknowledged: BTreeSet::new(),
            pinned: None,
            paused: false,
            last_step: None,
            last_end_ms: 0,
            out_seq: 0,
        });
        self.in_seq = Some(env.seq);
        self.state = ConnectionState::InSession;
        self.emit(
            EnvelopeType::Ack,
            json!({
                "protocol_id": header.protocol_id,
                "protocol_hash": header.protocol_hash,
                "backend": header.backend,
                "steps": self.session.as_ref().map_or(0, |s| s.protocol.steps.len()),
            }),
            out,
        )
    }

    fn on_segment(&mut self, env: &Envelope, out: &mut Vec<Envelope>) -> Result<(), Failure> {
        let seg: SegmentPayload = env.payload_as().map_err(|e| violation(e.to_string()))?;
        let s = self.session.as_mut().expect("in session");

        let submission =
            match s
                .gateway
                .submit_segment(&s.id, &seg.descriptor, seg.inline_observations)
            {
                Ok(sub) => sub,
                Err(e) => {
                    let code = match &e {
                        GatewayError::BackendFailure { seq_no, message } => {
                            s.log
                                .append(
                                    RecordKind::BackendFailure,
                                    seg.descriptor.t_start_ms,
                                    json!({ "seq_no": seq_no, "message": message }),
                                )
                                .map_err(log_failure)?;
                            ErrorCode::BackendFailure
                        }
                        _ => ErrorCode::SegmentRejected,
                    };
                    return Err(Failure::Soft(code, e.to_string()));
                }
            };
        s.last_end_ms = s.last_end_ms.max(seg.descriptor.t_end_ms);

        let mut deviations = Vec::new();
        let mut notes = submission.warnings;
        for o in &submission.observations {
            s.log
                .append(RecordKind::Observation, o.t_ms, o)
                .map_err(log_failure)?;
            let u = match s.engine.ingest(o) {
                Ok(u) => u,
                Err(e) => {
                    notes.push(format!("observation at {} ms dropped: {e}", o.t_ms));
                    continue;
                }
            };
            s.log
                .append(
                    RecordKind::Alignment,
                    o.t_ms,
                    json!({
                        "obs_index": u.obs_index,
                        "reported_state": u.reported_state,
                        "map_state": u.map_state,
                        "map_logscore": u.map_logscore,
                        "state_changed": u.state_changed,
                    }),
                )
                .map_err(log_failure)?;
            if let Some(step) = u.reported_state.step() {
                s.last_step = Some(step);
            }
            deviations.extend(s.monitor.observe(&u, o));
        }
        notes.extend(s.monitor.take_notes());

        if let Some(pin) = s.pinned {
            if s.engine.reported_state().step().is_some_and(|r| r >= pin) {
                s.pinned = None;
                s.log
                    .append(RecordKind::Pin, 0, json!({ "released": pin }))
                    .map_err(log_failure)?;
            }
        }
        for n in &notes {
            s.log
                .append(RecordKind::Note, 0, json!({ "note": n }))
                .map_err(log_failure)?;
        }
        s.deviations.extend(deviations.iter().cloned());

        if s.configs.echo_observations {
            let payload = json!({
                "seq_no": submission.ack.seq_no,
                "expected_frames": submission.ack.expected_frames,
                "observations": submission.observations,
            });
            self.emit(EnvelopeType::Observations, payload, out)?;
        }
        let s = self.session.as_ref().expect("in session");
        let feedback = feedback_for(s, seg.descriptor.t_end_ms, deviations, notes, None);
        self.emit(EnvelopeType::Feedback, &feedback, out)
    }

    fn on_operator_event(
        &mut self,
        env: &Envelope,
        out: &mut Vec<Envelope>,
    ) -> Result<(), Failure> {
        let ev: OperatorEvent = env.payload_as().map_err(|e| violation(e.to_string()))?;
        let s = self.session.as_mut().expect("in session");
        let invalid = |m: String| Failure::Soft(ErrorCode::InvalidOperatorEvent, m);

        match ev.kind {
            OperatorEventKind::AcknowledgeDeviation => {
                let id = ev.target.ok_or_else(|| {
                    invalid("acknowledge_deviation needs a target deviation id".into())
                })?;
                if !s.deviations.iter().any(|d| d.id == id) {
                    return Err(invalid(format!("no deviation with id {id}")));
                }
                s.acknowledged.insert(id);
            }
            OperatorEventKind::ForceAdvance => {
                let step = ev
                    .target
                    .ok_or_else(|| invalid("force_advance needs a target step".into()))?;
                if step as usize >= s.protocol.steps.len() {
                    return Err(invalid(format!("step {step} does not exist")));
                }
                s.pinned = Some(step as usize);
                s.log
                    .append(RecordKind::Pin, ev.t_ms, json!({ "pinned": step }))
                    .map_err(log_failure)?;
            }
            OperatorEventKind::Pause | OperatorEventKind::Resume => {
                if ev.target.is_some() {
                    return Err(invalid(format!("{:?} takes no target", ev.kind)));
                }
                s.paused = ev.kind == OperatorEventKind::Pause;
            }
            OperatorEventKind::Note => {
                if ev.text.as_deref().is_none_or(|t| t.trim().is_empty()) {
                    return Err(invalid("note needs text".into()));
                }
            }
        }
        let displayed = displayed_state(s);
        self.emit(
            EnvelopeType::Ack,
            json!({ "operator_event": ev, "accepted": true, "current_step": displayed }),
            out,
        )
    }

    fn on_session_end(&mut self, env: &Envelope, out: &mut Vec<Envelope>) -> Result<(), Failure> {
        let payload = env
            .payload
            .as_object()
            .expect("decoded envelopes carry objects");
        if !payload.is_empty() {
            return Err(violation("session_end payload must be empty"));
        }
        let s = self.session.as_mut().expect("in session");
        let end_ms = s.last_end_ms.max(s.log.clock_ms());
        let final_devs = s.monitor.finish(end_ms);
        s.deviations.extend(final_devs.iter().cloned());
        let segmentation = s
            .engine
            .finalize(end_ms)
            .unwrap_or_else(|_| StepSegmentation::default());

        let mut counts = BTreeMap::new();
        for d in &s.deviations {
            *counts.entry(d.kind).or_insert(0) += 1;
        }
        let summary = SessionSummary {
            segmentation,
            deviations: s.deviations.clone(),
            deviation_counts: counts,
            observation_count: s.engine.observation_count() as u64,
            quarantined_segments: s.gateway.quarantined(&s.id).unwrap_or_default().to_vec(),
        };
        let feedback = feedback_for(s, end_ms, final_devs, Vec::new(), Some(summary));
        self.emit(EnvelopeType::Feedback, &feedback, out)?;

        let s = self.session.take().expect("in session");
        s.log.close().map_err(log_failure)?;
        self.state = ConnectionState::Ready;
        self.in_seq = None;
        Ok(())
    }
}

fn displayed_state(s: &ActiveSession) -> StateId {
    match s.pinned {
        Some(p) => StateId::Step(p),
        None => s.engine.reported_state(),
    }
}

fn feedback_for(
    s: &ActiveSession,
    t_ms: u64,
    deviations: Vec<Deviation>,
    notes: Vec<String>,
    session_summary: Option<SessionSummary>,
) -> FeedbackMessage {
    let current = displayed_state(s);
    let steps = &s.protocol.steps;
    let (step_name, guidance) = match current {
        StateId::Step(i) => {
            let name = steps[i].name.clone();
            let guidance = match steps.get(i + 1) {
                Some(next) => format!("Next: {}. {}", next.name, next.description),
                None => format!("Final step: finish {name}, then end the session."),
            };
            (name, guidance)
        }
        StateId::Off => {
            let resume = &steps[s.last_step.unwrap_or(0)];
            (
                "off protocol".to_string(),
                format!(
                    "Off protocol. Resume with {}. {}",
                    resume.name, resume.description
                ),
            )
        }
    };
    FeedbackMessage {
        t_ms,
        current_step: current,
        step_name,
        guidance,
        deviations,
        notes,
        pinned: s.pinned.is_some(),
        paused: s.paused,
        session_summary,
    }
}
