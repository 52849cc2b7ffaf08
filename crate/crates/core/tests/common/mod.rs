#![allow(dead_code)]

pub mod metrics;
pub mod oracle;
pub mod suites;

use std::sync::Arc;

use benchmate_core::perception::{Observation, ObservationLiteral, SegmentRef};
use benchmate_core::protocol::{DurationWindow, Protocol, Step};

pub fn step(index: usize, label: &str, window: (u64, u64)) -> Step {
    Step {
        index,
        id: format!("step-{index}"),
        name: format!("Step {index}"),
        action_label: label.to_string(),
        description: format!("Perform {label}"),
        expected_duration_ms: DurationWindow::new(window.0, window.1),
        required_materials: Vec::new(),
        parameters: Vec::new(),
        requires_sterile: false,
        skippable: false,
    }
}

pub fn protocol_with_labels(labels: &[String]) -> Protocol {
    Protocol {
        id: format!("p{}", labels.len()),
        title: "generated".into(),
        version: "1".into(),
        materials: Vec::new(),
        steps: labels
            .iter()
            .enumerate()
            .map(|(i, l)| step(i, l, (1_000, 60_000)))
            .collect(),
    }
}

pub fn linear(n: usize) -> Arc<Protocol> {
    let labels: Vec<String> = (0..n).map(|i| format!("action_{i}")).collect();
    Arc::new(protocol_with_labels(&labels))
}

pub fn obs(t_ms: u64, label: &str, confidence: f64) -> Observation {
    ObservationLiteral::new(t_ms, label, confidence).bind(SegmentRef {
        session_id: "test".into(),
        seq_no: 0,
    })
}

use benchmate_core::eval::{GoldAnnotation, GoldEvent, GoldHeader, GoldSegment};
use benchmate_core::monitor::DeviationKind;
use benchmate_core::perception::{TraceFile, TraceHeader, TraceRecord};

/// Frame period of synthetic traces: one labeled observation per 250 ms.
pub const FRAME_MS: u64 = 250;

/// Builds a synthetic trace and its gold annotation side by side.
pub struct Script {
    pub protocol: Protocol,
    pub observations: Vec<ObservationLiteral>,
    pub cursor_ms: u64,
    pub segments: Vec<GoldSegment>,
    pub events: Vec<GoldEvent>,
}

impl Script {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            observations: Vec::new(),
            cursor_ms: 0,
            segments: Vec::new(),
            events: Vec::new(),
        }
    }

    /// Middle of the step's duration window, on the frame grid.
    pub fn nominal_ms(&self, step: usize) -> u64 {
        let w = self.protocol.steps[step].expected_duration_ms;
        ((w.min + w.max) / 2 / FRAME_MS).max(2) * FRAME_MS
    }

    /// Frames of `step` for `duration_ms`; `edit` may alter the k-th frame.
    pub fn perform_with(
        &mut self,
        step: usize,
        duration_ms: u64,
        mut edit: impl FnMut(usize, &mut ObservationLiteral),
    ) -> &mut Self {
        let label = self.protocol.steps[step].action_label.clone();
        let start = self.cursor_ms;
        for (k, t) in (start + FRAME_MS / 2..start + duration_ms)
            .step_by(FRAME_MS as usize)
            .enumerate()
        {
            let mut o = ObservationLiteral::new(t, label.as_str(), 0.9);
            edit(k, &mut o);
            self.observations.push(o);
        }
        self.cursor_ms += duration_ms;
        self.segments.push(GoldSegment {
            step_id: self.protocol.steps[step].id.clone(),
            t_start_ms: start,
            t_end_ms: self.cursor_ms,
        });
        self
    }

    pub fn perform(&mut self, step: usize) -> &mut Self {
        let d = self.nominal_ms(step);
        self.perform_with(step, d, |_, _| {})
    }

    pub fn perform_all(&mut self) -> &mut Self {
        for i in 0..self.protocol.steps.len() {
            self.perform(i);
        }
        self
    }

    /// Annotates a gold error event around the frame at `t_ms`.
    pub fn expect(&mut self, kind: DeviationKind, t_start_ms: u64, t_end_ms: u64) -> &mut Self {
        self.events.push(GoldEvent {
            kind,
            t_start_ms,
            t_end_ms,
            step_ref: None,
        });
        self
    }

    /// One trace record per `segment_ms`; the last one ends with the script.
    pub fn trace(&self, segment_ms: u64) -> TraceFile {
        let mut records = Vec::new();
        let mut start = 0;
        let mut seq = 0;
        while start < self.cursor_ms {
            let end = (start + segment_ms).min(self.cursor_ms);
            let observations = self
                .observations
                .iter()
                .filter(|o| o.t_ms >= start && (o.t_ms < end || end == self.cursor_ms))
                .cloned()
                .collect();
            records.push(TraceRecord {
                seq_no: seq,
                t_start_ms: Some(start),
                t_end_ms: Some(end),
                observations,
            });
            seq += 1;
            start = end;
        }
        TraceFile {
            header: TraceHeader {
                protocol_id: self.protocol.id.clone(),
                author: "synthetic".into(),
                notes: String::new(),
            },
            records,
        }
    }

    pub fn gold(&self) -> GoldAnnotation {
        GoldAnnotation {
            header: GoldHeader {
                protocol_id: self.protocol.id.clone(),
                session_id: None,
            },
            segments: self.segments.clone(),
            events: self.events.clone(),
            parameters: Vec::new(),
        }
    }
}
