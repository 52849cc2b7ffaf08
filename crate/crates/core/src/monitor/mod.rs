//! Rule-based deviation detection over the aligned stream.
//!
//! The `check_*` functions are pure. [`DeviationMonitor`] holds the little
//! per-session state the rules need (current step occupancy, the run of
//! unknown labels, already-reported skips) and assigns deviation ids.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignmentUpdate, StateId};
use crate::perception::{Event, Observation};
use crate::protocol::{Protocol, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    SterileBreach,
    StepMismatch,
    TimingDeviation,
    SkippedStep,
    ParameterDeviation,
    UnknownAction,
}

impl DeviationKind {
    pub const ALL: [DeviationKind; 6] = [
        DeviationKind::SterileBreach,
        DeviationKind::StepMismatch,
        DeviationKind::TimingDeviation,
        DeviationKind::SkippedStep,
        DeviationKind::ParameterDeviation,
        DeviationKind::UnknownAction,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationSeverity {
    Info,
    Warning,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deviation {
    /// Session-unique id, assigned in emission order starting at 1.
    pub id: u64,
    pub kind: DeviationKind,
    pub severity: DeviationSeverity,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ref: Option<usize>,
    pub message: String,
    pub suggested_correction: String,
}

impl Deviation {
    fn new(
        kind: DeviationKind,
        severity: DeviationSeverity,
        span: (u64, u64),
        step_ref: Option<usize>,
    ) -> Self {
        Self {
            id: 0,
            kind,
            severity,
            t_start_ms: span.0,
            t_end_ms: span.1,
            step_ref,
            message: String::new(),
            suggested_correction: String::new(),
        }
    }

    fn text(mut self, message: String, correction: String) -> Self {
        self.message = message;
        self.suggested_correction = correction;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Slack on both ends of a step's duration window, as a fraction of its max.
    pub timing_tolerance_frac: f64,
    /// Minimum confidence for an out-of-order label to count as a mismatch.
    pub mismatch_confidence: f64,
    pub unknown_run_length: u32,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            timing_tolerance_frac: 0.10,
            mismatch_confidence: 0.6,
            unknown_run_length: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorConfigError {
    #[error("timing_tolerance_frac must lie in [0, 1), got {0}")]
    Tolerance(f64),
    #[error("mismatch_confidence must lie in (0, 1], got {0}")]
    Confidence(f64),
    #[error("unknown_run_length must be at least 1")]
    RunLength,
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorConfigError> {
        if !(0.0..1.0).contains(&self.timing_tolerance_frac) {
            return Err(MonitorConfigError::Tolerance(self.timing_tolerance_frac));
        }
        if !(self.mismatch_confidence > 0.0 && self.mismatch_confidence <= 1.0) {
            return Err(MonitorConfigError::Confidence(self.mismatch_confidence));
        }
        if self.unknown_run_length == 0 {
            return Err(MonitorConfigError::RunLength);
        }
        Ok(())
    }

    fn tolerance_ms(&self, step: &Step) -> f64 {
        self.timing_tolerance_frac * step.expected_duration_ms.max as f64
    }
}

/// Critical timing deviation when the realized duration falls outside
/// `[min - tol, max + tol]` with `tol = timing_tolerance_frac * max`.
/// Both bounds are inclusive.
pub fn check_timing(
    step: &Step,
    entered_ms: u64,
    exited_ms: u64,
    config: &MonitorConfig,
) -> Option<Deviation> {
    let realized = exited_ms.saturating_sub(entered_ms);
    let tol = config.tolerance_ms(step);
    let w = step.expected_duration_ms;
    let lo = w.min as f64 - tol;
    let hi = w.max as f64 + tol;
    let r = realized as f64;
    if r >= lo && r <= hi {
        return None;
    }
    let (how, fix) = if r < lo {
        (
            "too short",
            format!(
                "Repeat or extend '{}' to at least {} s.",
                step.name,
                w.min / 1000
            ),
        )
    } else {
        (
            "too long",
            format!(
                "Check the outcome of '{}'; it ran past the {} s limit.",
                step.name,
                w.max / 1000
            ),
        )
    };
    Some(
        Deviation::new(
            DeviationKind::TimingDeviation,
            DeviationSeverity::Critical,
            (entered_ms, exited_ms.max(entered_ms)),
            Some(step.index),
        )
        .text(
            format!(
                "Step {} '{}' took {realized} ms, {how} for the expected {}-{} ms window.",
                step.index, step.name, w.min, w.max
            ),
            fix,
        ),
    )
}

/// Sterility-breaking events during a sterile step are critical breaches; a
/// spill is a warning whatever the step.
pub fn check_safety(step: Option<&Step>, o: &Observation) -> Vec<Deviation> {
    let mut out = Vec::new();
    let sterile = step.filter(|s| s.requires_sterile);
    let span = (o.t_ms, o.t_ms);
    for ev in &o.events {
        if let (Some(s), true) = (sterile, ev.breaks_sterility()) {
            let what = match ev {
                Event::GloveRemoved => "gloves removed",
                _ => "non-sterile contact",
            };
            out.push(
                Deviation::new(
                    DeviationKind::SterileBreach,
                    DeviationSeverity::Critical,
                    span,
                    Some(s.index),
                )
                .text(
                    format!("Sterile breach during step {} '{}': {what}.", s.index, s.name),
                    "Stop, discard potentially contaminated materials, re-glove and disinfect before continuing.".into(),
                ),
            );
        }
        if *ev == Event::Spill {
            out.push(
                Deviation::new(
                    DeviationKind::SterileBreach,
                    DeviationSeverity::Warning,
                    span,
                    step.map(|s| s.index),
                )
                .text(
                    "Spill detected.".into(),
                    "Contain and clean the spill per lab safety procedure.".into(),
                ),
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterFindings {
    pub deviations: Vec<Deviation>,
    /// Measurements that matched no spec by (name, unit). Never converted.
    pub notes: Vec<String>,
}

pub fn check_parameters(step: &Step, o: &Observation) -> ParameterFindings {
    let mut findings = ParameterFindings::default();
    for m in &o.measured_parameters {
        let Some(spec) = step
            .parameters
            .iter()
            .find(|p| p.name == m.name && p.unit == m.unit)
        else {
            findings.notes.push(format!(
                "measured {} = {} {} at {} ms matches no parameter of step {} by name and unit; ignored",
                m.name, m.value, m.unit, o.t_ms, step.index
            ));
            continue;
        };
        if (m.value - spec.expected).abs() > spec.tolerance {
            findings.deviations.push(
                Deviation::new(
                    DeviationKind::ParameterDeviation,
                    DeviationSeverity::Critical,
                    (o.t_ms, o.t_ms),
                    Some(step.index),
                )
                .text(
                    format!(
                        "{} measured {} {} in step {}; expected {} ± {} {}.",
                        m.name,
                        m.value,
                        m.unit,
                        step.index,
                        spec.expected,
                        spec.tolerance,
                        spec.unit
                    ),
                    format!("Adjust {} to {} {}.", m.name, spec.expected, spec.unit),
                ),
            );
        }
    }
    findings
}

/// Stream context the ordering rules need beyond the current update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OrderContext {
    /// Consecutive unknown labels ending at (and including) this observation.
    pub unknown_run: u32,
    /// Step occupied before the MAP path went off-protocol, if it did.
    pub last_step: Option<usize>,
}

pub fn check_order(
    u: &AlignmentUpdate,
    o: &Observation,
    p: &Protocol,
    config: &MonitorConfig,
    ctx: &OrderContext,
) -> Vec<Deviation> {
    let mut out = Vec::new();
    let span = (o.t_ms, o.t_ms);

    if let StateId::Step(i) = u.reported_state {
        if !o.is_unknown() && o.confidence >= config.mismatch_confidence {
            let owners: Vec<usize> = p.steps_with_label(&o.action_label).collect();
            let in_place = owners.iter().any(|&j| j == i || j == i + 1);
            if let (false, Some(&j)) = (in_place, owners.first()) {
                let current = &p.steps[i];
                out.push(
                    Deviation::new(
                        DeviationKind::StepMismatch,
                        DeviationSeverity::Warning,
                        span,
                        Some(i),
                    )
                    .text(
                        format!(
                            "Observed '{}' (step {j}) while at step {i} '{}'.",
                            o.action_label, current.name
                        ),
                        match p.steps.get(i + 1) {
                            Some(next) => {
                                format!("Expected '{}' or '{}' next.", current.name, next.name)
                            }
                            None => format!("Expected to finish '{}'.", current.name),
                        },
                    ),
                );
            }
        }
    }

    if let StateId::Step(to) = u.map_state {
        let from = match u.map_predecessor {
            None => Some(None),
            Some(StateId::Step(f)) => Some(Some(f)),
            Some(StateId::Off) => Some(ctx.last_step),
        };
        if let Some(from) = from {
            let first_expected = from.map_or(0, |f| f + 1);
            for skipped in first_expected..to {
                let s = &p.steps[skipped];
                if s.skippable {
                    continue;
                }
                out.push(
                    Deviation::new(
                        DeviationKind::SkippedStep,
                        DeviationSeverity::Warning,
                        span,
                        Some(skipped),
                    )
                    .text(
                        format!("Step {skipped} '{}' appears to have been skipped.", s.name),
                        format!("Go back and perform '{}': {}", s.name, s.description),
                    ),
                );
            }
        }
    }

    if o.is_unknown() && ctx.unknown_run == config.unknown_run_length {
        out.push(
            Deviation::new(
                DeviationKind::UnknownAction,
                DeviationSeverity::Info,
                span,
                u.reported_state.step(),
            )
            .text(
                format!("{} consecutive unrecognized actions.", ctx.unknown_run),
                "Confirm you are following the protocol; the current action is not recognized."
                    .into(),
            ),
        );
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Occupancy {
    step: usize,
    entered_ms: u64,
    overdue_sent: bool,
}

/// Per-session deviation state.
pub struct DeviationMonitor {
    protocol: Arc<Protocol>,
    config: MonitorConfig,
    occupancy: Option<Occupancy>,
    unknown_run: u32,
    reported_skips: BTreeSet<usize>,
    notes: Vec<String>,
    next_id: u64,
}

impl DeviationMonitor {
    pub fn new(protocol: Arc<Protocol>, config: MonitorConfig) -> Self {
        Self {
            protocol,
            config,
            occupancy: None,
            unknown_run: 0,
            reported_skips: BTreeSet::new(),
            notes: Vec::new(),
            next_id: 1,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    /// Notes produced since the last call.
    pub fn take_notes(&mut self) -> Vec<String> {
        std::mem::take(&mut self.notes)
    }

    pub fn current_step(&self) -> Option<usize> {
        self.occupancy.map(|o| o.step)
    }

    /// Runs every rule against one observation and the update it produced.
    pub fn observe(&mut self, u: &AlignmentUpdate, o: &Observation) -> Vec<Deviation> {
        let mut out = Vec::new();
        let protocol = Arc::clone(&self.protocol);

        self.unknown_run = if o.is_unknown() {
            self.unknown_run + 1
        } else {
            0
        };
        let ctx = OrderContext {
            unknown_run: self.unknown_run,
            last_step: self.occupancy.map(|occ| occ.step),
        };

        // Step exit. Excursions to OFF do not end the occupancy.
        if let StateId::Step(now) = u.reported_state {
            match self.occupancy {
                Some(occ) if occ.step == now => {}
                prev => {
                    if let Some(occ) = prev {
                        out.extend(check_timing(
                            &protocol.steps[occ.step],
                            occ.entered_ms,
                            o.t_ms,
                            &self.config,
                        ));
                    }
                    self.occupancy = Some(Occupancy {
                        step: now,
                        entered_ms: o.t_ms,
                        overdue_sent: false,
                    });
                }
            }
        }

        for d in check_order(u, o, &protocol, &self.config, &ctx) {
            if d.kind == DeviationKind::SkippedStep {
                let step = d.step_ref.expect("skips reference a step");
                if !self.reported_skips.insert(step) {
                    continue;
                }
            }
            out.push(d);
        }

        if let Some(occ) = self.occupancy.as_mut() {
            let step = &protocol.steps[occ.step];
            let limit = step.expected_duration_ms.max as f64 + self.config.tolerance_ms(step);
            if !occ.overdue_sent && o.t_ms.saturating_sub(occ.entered_ms) as f64 > limit {
                occ.overdue_sent = true;
                out.push(
                    Deviation::new(
                        DeviationKind::TimingDeviation,
                        DeviationSeverity::Warning,
                        (occ.entered_ms, o.t_ms),
                        Some(step.index),
                    )
                    .text(
                        format!(
                            "Step {} '{}' is overdue: {} ms elapsed, limit {} ms.",
                            step.index,
                            step.name,
                            o.t_ms - occ.entered_ms,
                            step.expected_duration_ms.max
                        ),
                        format!("Wrap up '{}' now.", step.name),
                    ),
                );
            }
        }

        let current = u.reported_state.step().map(|i| &protocol.steps[i]);
        out.extend(check_safety(current, o));
        if let Some(step) = current.filter(|s| !s.parameters.is_empty()) {
            let findings = check_parameters(step, o);
            out.extend(findings.deviations);
            self.notes.extend(findings.notes);
        } else if let Some(step) = current {
            for m in &o.measured_parameters {
                self.notes.push(format!(
                    "measured {} = {} {} at {} ms but step {} has no parameters; ignored",
                    m.name, m.value, m.unit, o.t_ms, step.index
                ));
            }
        }

        self.assign_ids(out)
    }

    /// Closes the final occupancy at session end.
    pub fn finish(&mut self, session_end_ms: u64) -> Vec<Deviation> {
        let out = self
            .occupancy
            .take()
            .and_then(|occ| {
                check_timing(
                    &self.protocol.steps[occ.step],
                    occ.entered_ms,
                    session_end_ms,
                    &self.config,
                )
            })
            .into_iter()
            .collect();
        self.assign_ids(out)
    }

    fn assign_ids(&mut self, mut out: Vec<Deviation>) -> Vec<Deviation> {
        for d in &mut out {
            d.id = self.next_id;
            self.next_id += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{MeasuredParameter, ObservationLiteral, SegmentRef};
    use crate::protocol::fixtures::{linear, step};
    use crate::protocol::ParameterSpec;

    fn obs(t_ms: u64, label: &str, confidence: f64) -> Observation {
        ObservationLiteral::new(t_ms, label, confidence).bind(SegmentRef {
            session_id: "t".into(),
            seq_no: 0,
        })
    }

    fn update(reported: StateId, map_predecessor: Option<StateId>) -> AlignmentUpdate {
        AlignmentUpdate {
            obs_index: 1,
            t_ms: 0,
            reported_state: reported,
            map_state: reported,
            map_predecessor,
            map_logscore: 0.0,
            state_changed: false,
            tentative_step_entry: None,
        }
    }

    fn cfg() -> MonitorConfig {
        MonitorConfig::default()
    }

    #[test]
    fn timing_window_with_tolerance() {
        let s = step(0, "incubate", (600_000, 900_000));
        let d = check_timing(&s, 0, 300_000, &cfg()).unwrap();
        assert_eq!(d.kind, DeviationKind::TimingDeviation);
        assert_eq!(d.severity, DeviationSeverity::Critical);
        assert!(check_timing(&s, 0, 900_000, &cfg()).is_none());
        assert!(check_timing(&s, 0, 990_000, &cfg()).is_none());
        assert!(check_timing(&s, 0, 991_000, &cfg()).is_some());
        assert!(check_timing(&s, 0, 510_000, &cfg()).is_none());
        assert!(check_timing(&s, 0, 509_999, &cfg()).is_some());
    }

    #[test]
    fn sterile_breach_only_on_sterile_steps() {
        let mut sterile = step(0, "pipette", (1, 10));
        sterile.requires_sterile = true;
        let mut o = obs(5, "pipette", 0.9);
        o.events.push(Event::GloveRemoved);
        let found = check_safety(Some(&sterile), &o);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, DeviationKind::SterileBreach);
        assert_eq!(found[0].severity, DeviationSeverity::Critical);

        let plain = step(0, "pipette", (1, 10));
        assert!(check_safety(Some(&plain), &o).is_empty());
    }

    #[test]
    fn spill_warns_on_any_step() {
        let mut o = obs(5, "pipette", 0.9);
        o.events.push(Event::Spill);
        for s in [None, Some(step(0, "pipette", (1, 10)))] {
            let found = check_safety(s.as_ref(), &o);
            assert_eq!(found.len(), 1);
            assert_eq!(found[0].severity, DeviationSeverity::Warning);
        }
    }

    fn volume_step() -> Step {
        let mut s = step(0, "pipette", (1, 10));
        s.parameters.push(ParameterSpec {
            name: "volume".into(),
            unit: "mL".into(),
            expected: 5.0,
            tolerance: 0.5,
        });
        s
    }

    fn measured(value: f64, unit: &str) -> Observation {
        let mut o = obs(5, "pipette", 0.9);
        o.measured_parameters.push(MeasuredParameter {
            name: "volume".into(),
            value,
            unit: unit.into(),
        });
        o
    }

    #[test]
    fn parameter_tolerance() {
        let s = volume_step();
        assert!(check_parameters(&s, &measured(5.4, "mL"))
            .deviations
            .is_empty());
        let f = check_parameters(&s, &measured(5.6, "mL"));
        assert_eq!(f.deviations.len(), 1);
        assert_eq!(f.deviations[0].kind, DeviationKind::ParameterDeviation);
    }

    #[test]
    fn parameter_unit_mismatch_is_a_note() {
        let f = check_parameters(&volume_step(), &measured(5_000.0, "µL"));
        assert!(f.deviations.is_empty());
        assert_eq!(f.notes.len(), 1);
    }

    #[test]
    fn confident_far_label_is_a_mismatch() {
        let p = linear(5);
        let o = obs(10, "action_3", 0.9);
        let found = check_order(
            &update(StateId::Step(0), Some(StateId::Step(0))),
            &o,
            &p,
            &cfg(),
            &OrderContext::default(),
        );
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, DeviationKind::StepMismatch);

        let next = obs(10, "action_1", 0.9);
        assert!(check_order(
            &update(StateId::Step(0), Some(StateId::Step(0))),
            &next,
            &p,
            &cfg(),
            &OrderContext::default()
        )
        .is_empty());

        let unsure = obs(10, "action_3", 0.5);
        assert!(check_order(
            &update(StateId::Step(0), Some(StateId::Step(0))),
            &unsure,
            &p,
            &cfg(),
            &OrderContext::default()
        )
        .is_empty());
    }

    #[test]
    fn advance_by_two_skips_one() {
        let p = linear(4);
        let found = check_order(
            &update(StateId::Step(2), Some(StateId::Step(0))),
            &obs(10, "action_2", 0.9),
            &p,
            &cfg(),
            &OrderContext::default(),
        );
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].kind, DeviationKind::SkippedStep);
        assert_eq!(found[0].step_ref, Some(1));
    }

    #[test]
    fn skippable_steps_are_not_reported() {
        let mut p = linear(4);
        p.steps[1].skippable = true;
        let found = check_order(
            &update(StateId::Step(2), Some(StateId::Step(0))),
            &obs(10, "action_2", 0.9),
            &p,
            &cfg(),
            &OrderContext::default(),
        );
        assert!(found.is_empty());
    }

    #[test]
    fn unknown_run_fires_once() {
        let p = linear(3);
        let mut fired = 0;
        for run in 1..=5 {
            let ctx = OrderContext {
                unknown_run: run,
                last_step: Some(0),
            };
            fired += check_order(
                &update(StateId::Step(0), Some(StateId::Step(0))),
                &obs(10, "unknown", 0.4),
                &p,
                &cfg(),
                &ctx,
            )
            .len();
        }
        assert_eq!(fired, 1);
    }

    #[test]
    fn monitor_checks_timing_on_exit_and_finish() {
        let mut p = linear(2);
        p.steps[0].expected_duration_ms = crate::protocol::DurationWindow::new(10_000, 20_000);
        p.steps[1].expected_duration_ms = crate::protocol::DurationWindow::new(10_000, 20_000);
        let mut m = DeviationMonitor::new(Arc::new(p), cfg());
        assert!(m
            .observe(&update(StateId::Step(0), None), &obs(0, "action_0", 0.9))
            .is_empty());
        let exit = m.observe(
            &update(StateId::Step(1), Some(StateId::Step(0))),
            &obs(2_000, "action_1", 0.9),
        );
        assert_eq!(exit.len(), 1);
        assert_eq!(exit[0].kind, DeviationKind::TimingDeviation);
        assert_eq!(exit[0].id, 1);
        assert!(m.finish(17_000).is_empty());
    }

    #[test]
    fn off_excursion_keeps_occupancy() {
        let mut m = DeviationMonitor::new(Arc::new(linear(2)), cfg());
        m.observe(&update(StateId::Step(0), None), &obs(0, "action_0", 0.9));
        m.observe(
            &update(StateId::Off, Some(StateId::Step(0))),
            &obs(1_000, "unknown", 0.9),
        );
        m.observe(
            &update(StateId::Step(0), Some(StateId::Off)),
            &obs(2_000, "action_0", 0.9),
        );
        assert_eq!(m.current_step(), Some(0));
        assert!(m.finish(5_000).is_empty());
    }

    #[test]
    fn overdue_warning_once() {
        let mut m = DeviationMonitor::new(Arc::new(linear(1)), cfg());
        m.observe(&update(StateId::Step(0), None), &obs(0, "action_0", 0.9));
        let mut warned = 0;
        for t in [50_000, 70_000, 80_000] {
            warned += m
                .observe(
                    &update(StateId::Step(0), Some(StateId::Step(0))),
                    &obs(t, "action_0", 0.9),
                )
                .len();
        }
        assert_eq!(warned, 1);
    }

    #[test]
    fn config_validation() {
        cfg().validate().unwrap();
        assert!(MonitorConfig {
            timing_tolerance_frac: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(MonitorConfig {
            mismatch_confidence: 0.0,
            ..cfg()
        }
        .validate()
        .is_err());
    }
}
