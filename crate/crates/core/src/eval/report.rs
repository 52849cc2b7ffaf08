use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gold::GoldAnnotation;
use super::{kendall_tau, kind_label, match_segments, rubric_score, score_errors, Rates, Span};
use crate::monitor::DeviationKind;
use crate::protocol::Protocol;
use crate::session::{base_step_id, SessionSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub step_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Matched,
    Missed,
    FalseAlarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub kind: DeviationKind,
    pub status: EventStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<(u64, u64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_distance_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub protocol_id: String,
    pub iou_threshold: f64,
    pub window_ms: u64,
    pub seg_precision: f64,
    pub seg_recall: f64,
    pub seg_f1: f64,
    /// Kendall's tau of matched step order, absent with fewer than two matches.
    pub order_tau: Option<f64>,
    /// `(tau + 1) / 2`, or 1 with fewer than two matches.
    pub order_concordance: f64,
    pub err_precision: f64,
    pub err_recall: f64,
    pub err_f1: f64,
    pub rubric_0_5: f64,
    pub segments: Vec<SegmentRow>,
    pub events: Vec<EventRow>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("prediction is for protocol {pred:?}, annotation for {gold:?}")]
    ProtocolMismatch { pred: String, gold: String },
    #[error("iou threshold must lie in (0, 1], got {0}")]
    BadIou(f64),
}

fn check_iou(iou: f64) -> Result<(), ScoreError> {
    if iou > 0.0 && iou <= 1.0 {
        Ok(())
    } else {
        Err(ScoreError::BadIou(iou))
    }
}

/// Scores a finalized session summary against a gold annotation.
pub fn score_session(
    protocol: &Protocol,
    summary: &SessionSummary,
    gold: &GoldAnnotation,
    iou_threshold: f64,
    window_ms: u64,
) -> Result<ScoreReport, ScoreError> {
    check_iou(iou_threshold)?;
    if protocol.id != gold.header.protocol_id {
        return Err(ScoreError::ProtocolMismatch {
            pred: protocol.id.clone(),
            gold: gold.header.protocol_id.clone(),
        });
    }
    let pred: Vec<Span> = summary
        .segmentation
        .step_intervals()
        .map(|(s, iv)| {
            let id = protocol
                .step(s)
                .map_or_else(|| format!("#{s}"), |st| st.id.clone());
            Span::new(id, iv.t_start_ms, iv.t_end_ms)
        })
        .collect();
    let gold_spans: Vec<Span> = gold
        .segments
        .iter()
        .map(|g| Span::new(g.step_id.clone(), g.t_start_ms, g.t_end_ms))
        .collect();
    let seg = match_segments(&pred, &gold_spans, iou_threshold);

    let mut segments = Vec::new();
    let mut pred_hit = vec![false; pred.len()];
    let mut gold_hit = vec![false; gold_spans.len()];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &(i, j) in &seg.pairs {
        pred_hit[i] = true;
        gold_hit[j] = true;
        let (p, g) = (&pred[i], &gold_spans[j]);
        a.push(p.t_start_ms);
        b.push(g.t_start_ms);
        segments.push(SegmentRow {
            step_id: p.label.clone(),
            pred: Some((p.t_start_ms, p.t_end_ms)),
            gold: Some((g.t_start_ms, g.t_end_ms)),
            iou: Some(super::temporal_iou(
                (p.t_start_ms, p.t_end_ms),
                (g.t_start_ms, g.t_end_ms),
            )),
        });
    }
    unmatched_segments(&pred, &pred_hit, &gold_spans, &gold_hit, &mut segments);

    let pred_events: Vec<Span> = summary
        .deviations
        .iter()
        .map(|d| Span::new(kind_label(d.kind), d.t_start_ms, d.t_end_ms))
        .collect();
    let gold_events: Vec<Span> = gold
        .events
        .iter()
        .map(|e| Span::new(kind_label(e.kind), e.t_start_ms, e.t_end_ms))
        .collect();
    let err = score_errors(&pred_events, &gold_events, window_ms);
    let mut events = Vec::new();
    let mut pred_hit = vec![false; pred_events.len()];
    let mut gold_hit = vec![false; gold_events.len()];
    for &(i, j) in &err.pairs {
        pred_hit[i] = true;
        gold_hit[j] = true;
        let (p, g) = (&pred_events[i], &gold_events[j]);
        events.push(EventRow {
            kind: summary.deviations[i].kind,
            status: EventStatus::Matched,
            deviation_id: Some(summary.deviations[i].id),
            pred: Some((p.t_start_ms, p.t_end_ms)),
            gold: Some((g.t_start_ms, g.t_end_ms)),
            center_distance_ms: Some(super::center_gap2(p, g) as f64 / 2.0),
        });
    }
    for (g, _) in gold.events.iter().zip(&gold_hit).filter(|(_, h)| !**h) {
        events.push(EventRow {
            kind: g.kind,
            status: EventStatus::Missed,
            deviation_id: None,
            pred: None,
            gold: Some((g.t_start_ms, g.t_end_ms)),
            center_distance_ms: None,
        });
    }
    for (d, _) in summary
        .deviations
        .iter()
        .zip(&pred_hit)
        .filter(|(_, h)| !**h)
    {
        events.push(EventRow {
            kind: d.kind,
            status: EventStatus::FalseAlarm,
            deviation_id: Some(d.id),
            pred: Some((d.t_start_ms, d.t_end_ms)),
            gold: None,
            center_distance_ms: None,
        });
    }

    Ok(assemble(
        &protocol.id,
        iou_threshold,
        window_ms,
        seg.rates,
        kendall_tau(&a, &b),
        err.rates,
        segments,
        events,
    ))
}

/// Scores an exported stepwise protocol. Exports carry no absolute times, so
/// steps match gold segments by step id alone (each at most once, in order)
/// and there are no predicted deviations.
pub fn score_export(
    observed: &Protocol,
    gold: &GoldAnnotation,
    iou_threshold: f64,
    window_ms: u64,
) -> Result<ScoreReport, ScoreError> {
    check_iou(iou_threshold)?;
    let mut gold_hit = vec![false; gold.segments.len()];
    let mut segments = Vec::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut matches = 0;
    for (k, step) in observed.steps.iter().enumerate() {
        let id = base_step_id(&step.id);
        let hit = gold
            .segments
            .iter()
            .enumerate()
            .find(|(j, g)| !gold_hit[*j] && g.step_id == id && !step.id.contains('~'));
        match hit {
            Some((j, g)) => {
                gold_hit[j] = true;
                matches += 1;
                a.push(k as u64);
                b.push(g.t_start_ms);
                segments.push(SegmentRow {
                    step_id: id.to_string(),
                    pred: None,
                    gold: Some((g.t_start_ms, g.t_end_ms)),
                    iou: None,
                });
            }
            None => segments.push(SegmentRow {
                step_id: step.id.clone(),
                pred: None,
                gold: None,
                iou: None,
            }),
        }
    }
    for (g, _) in gold
        .segments
        .iter()
        .zip(&gold_hit)
        .filter(|(_, hit)| !**hit)
    {
        segments.push(SegmentRow {
            step_id: g.step_id.clone(),
            pred: None,
            gold: Some((g.t_start_ms, g.t_end_ms)),
            iou: None,
        });
    }
    let seg = Rates::from_counts(matches, observed.steps.len(), gold.segments.len());
    let err = Rates::from_counts(0, 0, gold.events.len());
    let events = gold
        .events
        .iter()
        .map(|g| EventRow {
            kind: g.kind,
            status: EventStatus::Missed,
            deviation_id: None,
            pred: None,
            gold: Some((g.t_start_ms, g.t_end_ms)),
            center_distance_ms: None,
        })
        .collect();
    Ok(assemble(
        &observed.id,
        iou_threshold,
        window_ms,
        seg,
        kendall_tau(&a, &b),
        err,
        segments,
        events,
    ))
}

fn unmatched_segments(
    pred: &[Span],
    pred_hit: &[bool],
    gold: &[Span],
    gold_hit: &[bool],
    rows: &mut Vec<SegmentRow>,
) {
    for (g, _) in gold.iter().zip(gold_hit).filter(|(_, h)| !**h) {
        rows.push(SegmentRow {
            step_id: g.label.clone(),
            pred: None,
            gold: Some((g.t_start_ms, g.t_end_ms)),
            iou: None,
        });
    }
    for (p, _) in pred.iter().zip(pred_hit).filter(|(_, h)| !**h) {
        rows.push(SegmentRow {
            step_id: p.label.clone(),
            pred: Some((p.t_start_ms, p.t_end_ms)),
            gold: None,
            iou: None,
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    protocol_id: &str,
    iou_threshold: f64,
    window_ms: u64,
    seg: Rates,
    tau: Option<f64>,
    err: Rates,
    mut segments: Vec<SegmentRow>,
    mut events: Vec<EventRow>,
) -> ScoreReport {
    let first = |a: Option<(u64, u64)>, b: Option<(u64, u64)>| a.or(b).map(|(s, _)| s);
    // Stable sort: rows without times (export scoring) keep their order.
    segments.sort_by_key(|r| first(r.gold, r.pred));
    events.sort_by_key(|r| first(r.gold, r.pred));
    ScoreReport {
        protocol_id: protocol_id.to_string(),
        iou_threshold,
        window_ms,
        seg_precision: seg.precision,
        seg_recall: seg.recall,
        seg_f1: seg.f1,
        order_tau: tau,
        order_concordance: tau.map_or(1.0, |t| (t + 1.0) / 2.0),
        err_precision: err.precision,
        err_recall: err.recall,
        err_f1: err.f1,
        rubric_0_5: rubric_score(seg.f1, err.f1),
        segments,
        events,
    }
}

fn span(s: Option<(u64, u64)>) -> String {
    s.map_or_else(|| "-".to_string(), |(a, b)| format!("{a}..{b}"))
}

impl ScoreReport {
    /// Plain-text summary for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "protocol {}  (iou >= {}, window {} ms)",
            self.protocol_id, self.iou_threshold, self.window_ms
        );
        let _ = writeln!(
            out,
            "{:<12} {:>9} {:>9} {:>9}",
            "", "precision", "recall", "f1"
        );
        let _ = writeln!(
            out,
            "{:<12} {:>9.3} {:>9.3} {:>9.3}",
            "segments", self.seg_precision, self.seg_recall, self.seg_f1
        );
        let _ = writeln!(
            out,
            "{:<12} {:>9.3} {:>9.3} {:>9.3}",
            "errors", self.err_precision, self.err_recall, self.err_f1
        );
        let _ = writeln!(out, "order concordance {:.3}", self.order_concordance);
        let _ = writeln!(out, "rubric (0-5 proxy) {:.2}", self.rubric_0_5);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<24} {:>17} {:>17} {:>6}",
            "step", "pred ms", "gold ms", "iou"
        );
        for r in &self.segments {
            let iou = r.iou.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:<24} {:>17} {:>17} {:>6}",
                r.step_id,
                span(r.pred),
                span(r.gold),
                iou
            );
        }
        if !self.events.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<20} {:<11} {:>17} {:>17}",
                "event", "status", "pred ms", "gold ms"
            );
            for e in &self.events {
                let status = match e.status {
                    EventStatus::Matched => "matched",
                    EventStatus::Missed => "missed",
                    EventStatus::FalseAlarm => "false alarm",
                };
                let _ = writeln!(
                    out,
                    "{:<20} {:<11} {:>17} {:>17}",
                    kind_label(e.kind),
                    status,
                    span(e.pred),
                    span(e.gold)
                );
            }
        }
        out
    }
}
