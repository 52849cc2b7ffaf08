use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::envelope::{EnvelopeType, FeedbackMessage, SessionSummary};
use super::log::{RecordKind, SessionLog};
use crate::perception::Observation;
use crate::protocol::{parse_protocol, to_document, DurationWindow, ParameterSpec, Protocol, Step};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("session was not finalized; the log has no summary")]
    SessionNotFinalized,
    #[error("no protocol step was observed")]
    NothingObserved,
    #[error("log record {record}: {message}")]
    BadRecord { record: u64, message: String },
    #[error("embedded protocol document: {0}")]
    BadProtocol(String),
}

/// The final summary a finalized session log carries.
pub fn session_summary(log: &SessionLog) -> Result<SessionSummary, ExportError> {
    let last = log
        .records
        .iter()
        .rev()
        .filter(|r| r.kind == RecordKind::Outbound)
        .find(|r| r.data.get("type").and_then(|t| t.as_str()) == Some("feedback"));
    let Some(r) = last else {
        return Err(ExportError::SessionNotFinalized);
    };
    let env: super::envelope::Envelope =
        serde_json::from_value(r.data.clone()).map_err(|e| ExportError::BadRecord {
            record: r.i,
            message: e.to_string(),
        })?;
    debug_assert_eq!(env.kind, EnvelopeType::Feedback);
    let fb: FeedbackMessage = env.payload_as().map_err(|e| ExportError::BadRecord {
        record: r.i,
        message: e.to_string(),
    })?;
    fb.session_summary.ok_or(ExportError::SessionNotFinalized)
}

/// Builds the protocol the operator actually performed: one step per visited
/// step interval, with realized durations, observed materials and the last
/// measured value of each declared parameter. Revisited steps get ids
/// suffixed `~2`, `~3`, ...
pub fn export_stepwise_protocol(log: &SessionLog) -> Result<Protocol, ExportError> {
    let summary = session_summary(log)?;
    let gold = parse_protocol(&log.header.protocol_document)
        .map_err(|e| ExportError::BadProtocol(e.to_string()))?;
    let mut observations = Vec::new();
    for r in log
        .records
        .iter()
        .filter(|r| r.kind == RecordKind::Observation)
    {
        let o: Observation =
            serde_json::from_value(r.data.clone()).map_err(|e| ExportError::BadRecord {
                record: r.i,
                message: e.to_string(),
            })?;
        observations.push(o);
    }

    let intervals = &summary.segmentation.intervals;
    let last_end = intervals.last().map(|iv| iv.t_end_ms);
    let mut visits: BTreeMap<usize, usize> = BTreeMap::new();
    let mut steps = Vec::new();
    for (s, iv) in summary.segmentation.step_intervals() {
        let Some(g) = gold.step(s) else {
            return Err(ExportError::BadProtocol(format!(
                "summary refers to step {s}"
            )));
        };
        let inside = |o: &&Observation| {
            o.t_ms >= iv.t_start_ms && (o.t_ms < iv.t_end_ms || Some(iv.t_end_ms) == last_end)
        };
        let seen: Vec<&Observation> = observations.iter().filter(inside).collect();

        let materials: BTreeSet<String> = seen
            .iter()
            .flat_map(|o| o.detected_materials.iter())
            .filter(|m| !m.trim().is_empty())
            .cloned()
            .collect();
        let parameters = g
            .parameters
            .iter()
            .filter_map(|spec| {
                let value = seen
                    .iter()
                    .flat_map(|o| o.measured_parameters.iter())
                    .rfind(|m| m.name == spec.name && m.unit == spec.unit && m.value.is_finite())?
                    .value;
                Some(ParameterSpec {
                    expected: value,
                    ..spec.clone()
                })
            })
            .collect();

        let visit = visits.entry(s).or_insert(0);
        *visit += 1;
        let id = if *visit == 1 {
            g.id.clone()
        } else {
            format!("{}~{}", g.id, visit)
        };
        let realized = iv.duration_ms().max(1);
        steps.push(Step {
            index: steps.len(),
            id,
            name: g.name.clone(),
            action_label: g.action_label.clone(),
            description: g.description.clone(),
            expected_duration_ms: DurationWindow::new(realized, realized),
            required_materials: materials.into_iter().collect(),
            parameters,
            requires_sterile: g.requires_sterile,
            skippable: g.skippable,
        });
    }
    if steps.is_empty() {
        return Err(ExportError::NothingObserved);
    }
    let materials: BTreeSet<String> = steps
        .iter()
        .flat_map(|s| s.required_materials.iter().cloned())
        .collect();
    Ok(Protocol {
        id: format!("{}-observed", gold.id),
        title: format!("Observed: {}", gold.title),
        version: format!("{}+{}", gold.version, log.header.session_id),
        materials: materials.into_iter().collect(),
        steps,
    })
}

/// [`export_stepwise_protocol`] rendered as a protocol document.
pub fn export_document(log: &SessionLog) -> Result<String, ExportError> {
    export_stepwise_protocol(log).map(|p| to_document(&p))
}

/// Step ids of `observed` with any revisit suffix removed.
pub fn base_step_id(id: &str) -> &str {
    id.split_once('~').map_or(id, |(b, _)| b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolDiff {
    /// Gold step ids never performed.
    pub missing: Vec<String>,
    /// Performed step ids not in the gold protocol, and revisits.
    pub extra: Vec<String>,
    /// Whether first visits happened in gold order.
    pub order_preserved: bool,
}

pub fn diff_protocols(gold: &Protocol, observed: &Protocol) -> ProtocolDiff {
    let performed: BTreeSet<&str> = observed.steps.iter().map(|s| base_step_id(&s.id)).collect();
    let missing = gold
        .steps
        .iter()
        .filter(|s| !performed.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    let extra = observed
        .steps
        .iter()
        .filter(|s| s.id.contains('~') || gold.step_by_id(&s.id).is_none())
        .map(|s| s.id.clone())
        .collect();
    let mut seen = BTreeSet::new();
    let firsts: Vec<usize> = observed
        .steps
        .iter()
        .filter_map(|s| gold.step_by_id(base_step_id(&s.id)))
        .filter(|g| seen.insert(g.index))
        .map(|g| g.index)
        .collect();
    ProtocolDiff {
        missing,
        extra,
        order_preserved: firsts.windows(2).all(|w| w[0] < w[1]),
    }
}
