//! End-to-end conformance suites over synthetic traces, shared by the
//! integration tests and the acceptance run. Each check returns a one-line
//! summary on success and a description of the failure otherwise.

use std::sync::Arc;

use benchmate_core::eval::{score_session, DEFAULT_IOU, DEFAULT_WINDOW_MS};
use benchmate_core::monitor::{DeviationKind, DeviationSeverity};
use benchmate_core::perception::{Event, MeasuredParameter};
use benchmate_core::protocol::{
    parse_protocol, to_document, validate_protocol, DurationWindow, ParameterSpec, Protocol,
};
use benchmate_core::session::{
    simulate, EnvelopeType, FeedbackMessage, SessionConfigs, SessionSummary, Simulation,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{step, Script};

pub const IDENTITY_SIZES: [usize; 10] = [3, 4, 5, 6, 8, 10, 12, 15, 18, 20];

pub fn run_script(script: &Script, segment_ms: u64) -> Result<Simulation, String> {
    simulate(
        script.protocol.clone(),
        script.trace(segment_ms),
        SessionConfigs::default(),
        "suite",
        Arc::new(|| 0),
    )
    .map_err(|e| e.to_string())
}

pub fn summary_of(sim: &Simulation) -> Result<SessionSummary, String> {
    let last = sim
        .outbound
        .iter()
        .rev()
        .find(|e| e.kind == EnvelopeType::Feedback)
        .ok_or("no feedback")?;
    let fb: FeedbackMessage = last.payload_as().map_err(|e| e.to_string())?;
    fb.session_summary
        .ok_or_else(|| "last feedback carries no summary".to_string())
}

/// A protocol with `n` steps, varied windows, materials, parameters, sterile
/// steps and a few non-adjacent repeated labels.
pub fn identity_protocol(n: usize, seed: u64) -> Protocol {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let materials: Vec<String> = ["pbs", "media", "trypsin", "pipette"]
        .map(String::from)
        .to_vec();
    let mut steps = Vec::new();
    let mut prev = String::new();
    for i in 0..n {
        let label = loop {
            let l = format!("act_{}", rng.random_range(0..n.max(4)));
            if l != prev {
                break l;
            }
        };
        prev = label.clone();
        let min = rng.random_range(8..=60) * 250;
        let max = min + rng.random_range(4..=80) * 250;
        let mut s = step(i, &label, (min, max));
        s.expected_duration_ms = DurationWindow::new(min, max);
        s.requires_sterile = rng.random_bool(0.3);
        if rng.random_bool(0.4) {
            s.required_materials = vec![materials[rng.random_range(0..materials.len())].clone()];
        }
        if rng.random_bool(0.3) {
            s.parameters = vec![ParameterSpec {
                name: "volume".into(),
                unit: "mL".into(),
                expected: rng.random_range(1..=20) as f64 / 2.0,
                tolerance: 0.25,
            }];
        }
        steps.push(s);
    }
    Protocol {
        id: format!("identity-{n}"),
        title: format!("Identity protocol with {n} steps"),
        version: "1".into(),
        materials,
        steps,
    }
}

/// Frames that carry each step's materials and its exact parameter values.
pub fn perfect_script(p: &Protocol) -> Script {
    let mut s = Script::new(p.clone());
    for step in &p.steps {
        let d = s.nominal_ms(step.index);
        let (materials, params) = (step.required_materials.clone(), step.parameters.clone());
        s.perform_with(step.index, d, |k, o| {
            o.detected_materials = materials.clone();
            if k == 1 {
                o.measured_parameters = params
                    .iter()
                    .map(|p| MeasuredParameter {
                        name: p.name.clone(),
                        value: p.expected,
                        unit: p.unit.clone(),
                    })
                    .collect();
            }
        });
    }
    s
}

pub fn identity_case(n: usize, seed: u64) -> Result<String, String> {
    let p = identity_protocol(n, seed);
    if !validate_protocol(&p).ok {
        return Err(format!(
            "generated protocol invalid: {:?}",
            validate_protocol(&p).issues
        ));
    }
    let p = parse_protocol(&to_document(&p)).map_err(|e| e.to_string())?;
    let script = perfect_script(&p);
    let segment_ms = 5_000 + (seed % 6) * 1_000;
    let sim = run_script(&script, segment_ms)?;
    let summary = summary_of(&sim)?;
    let report = score_session(&p, &summary, &script.gold(), DEFAULT_IOU, DEFAULT_WINDOW_MS)
        .map_err(|e| e.to_string())?;
    if !summary.deviations.is_empty() {
        return Err(format!(
            "{n} steps: unexpected deviations {:?}",
            summary.deviations
        ));
    }
    if report.seg_f1 != 1.0 || report.rubric_0_5 != 5.0 {
        return Err(format!(
            "{n} steps: seg_f1 {} rubric {}",
            report.seg_f1, report.rubric_0_5
        ));
    }
    Ok(format!("{n} steps: f1 1.0, 0 deviations, rubric 5.0"))
}

pub fn identity_suite() -> Result<String, String> {
    for (k, &n) in IDENTITY_SIZES.iter().enumerate() {
        identity_case(n, 0x1d_0000 + k as u64)?;
    }
    Ok(format!(
        "{} protocols ({}-{} steps)",
        IDENTITY_SIZES.len(),
        IDENTITY_SIZES[0],
        IDENTITY_SIZES[9]
    ))
}

fn linear_protocol(n: usize, id: &str) -> Protocol {
    Protocol {
        id: id.into(),
        title: id.into(),
        version: "1".into(),
        materials: Vec::new(),
        steps: (0..n)
            .map(|i| step(i, &format!("action_{i}"), (4_000, 20_000)))
            .collect(),
    }
}

/// Synthetic trace that commits exactly one deviation of `kind`, with the
/// matching gold annotation.
pub fn fault_script(kind: DeviationKind) -> Script {
    match kind {
        DeviationKind::SterileBreach => {
            let mut p = linear_protocol(4, "fault-sterile");
            p.steps[2].requires_sterile = true;
            let mut s = Script::new(p);
            s.perform(0).perform(1);
            let t = s.cursor_ms + 10 * 250 + 125;
            s.perform_with(2, s.nominal_ms(2), |k, o| {
                if k == 10 {
                    o.events = vec![Event::GloveRemoved];
                }
            });
            s.perform(3).expect(kind, t, t);
            s
        }
        DeviationKind::StepMismatch => {
            // Far enough ahead that the alignment stays put.
            let mut s = Script::new(linear_protocol(8, "fault-mismatch"));
            s.perform(0);
            let t = s.cursor_ms + 8 * 250 + 125;
            s.perform_with(1, s.nominal_ms(1), |k, o| {
                if k == 8 {
                    o.action_label = "action_7".into();
                }
            });
            for i in 2..8 {
                s.perform(i);
            }
            s.expect(kind, t, t);
            s
        }
        DeviationKind::TimingDeviation => {
            let mut s = Script::new(linear_protocol(4, "fault-timing"));
            s.perform(0);
            let start = s.cursor_ms;
            s.perform_with(1, 1_000, |_, _| {});
            s.perform(2).perform(3).expect(kind, start, start + 1_000);
            s
        }
        DeviationKind::SkippedStep => {
            let mut s = Script::new(linear_protocol(5, "fault-skip"));
            s.perform(0).perform(1);
            let t = s.cursor_ms + 125;
            s.perform(3).perform(4).expect(kind, t, t);
            s
        }
        DeviationKind::ParameterDeviation => {
            let mut p = linear_protocol(4, "fault-parameter");
            p.steps[1].parameters = vec![ParameterSpec {
                name: "volume".into(),
                unit: "mL".into(),
                expected: 2.0,
                tolerance: 0.1,
            }];
            let mut s = Script::new(p);
            s.perform(0);
            let t = s.cursor_ms + 6 * 250 + 125;
            s.perform_with(1, s.nominal_ms(1), |k, o| {
                let value = if k == 6 { 3.0 } else { 2.0 };
                if k % 3 == 0 {
                    o.measured_parameters = vec![MeasuredParameter {
                        name: "volume".into(),
                        value,
                        unit: "mL".into(),
                    }];
                }
            });
            s.perform(2).perform(3).expect(kind, t, t);
            s
        }
        DeviationKind::UnknownAction => {
            let mut s = Script::new(linear_protocol(4, "fault-unknown"));
            s.perform(0);
            let first = s.cursor_ms + 12 * 250 + 125;
            s.perform_with(1, s.nominal_ms(1), |k, o| {
                if (12..15).contains(&k) {
                    o.action_label = "unknown".into();
                    o.confidence = 0.2;
                }
            });
            s.perform(2).perform(3).expect(kind, first, first + 500);
            s
        }
    }
}

pub fn fault_case(kind: DeviationKind) -> Result<String, String> {
    let script = fault_script(kind);
    let sim = run_script(&script, 5_000)?;
    let summary = summary_of(&sim)?;
    let of_kind = summary.deviations.iter().filter(|d| d.kind == kind).count();
    if of_kind != 1 {
        return Err(format!(
            "{kind:?}: {of_kind} deviations of this kind, wanted 1: {:?}",
            summary.deviations
        ));
    }
    if let Some(d) = summary
        .deviations
        .iter()
        .find(|d| d.kind != kind && d.severity == DeviationSeverity::Critical)
    {
        return Err(format!("{kind:?}: spurious critical {d:?}"));
    }
    let report = score_session(
        &script.protocol,
        &summary,
        &script.gold(),
        DEFAULT_IOU,
        DEFAULT_WINDOW_MS,
    )
    .map_err(|e| e.to_string())?;
    if report.err_recall != 1.0 {
        return Err(format!(
            "{kind:?}: not matched within the window: {:?}",
            report.events
        ));
    }
    Ok(format!(
        "{kind:?}: 1 detection, {} total",
        summary.deviations.len()
    ))
}

pub fn fault_suite() -> Result<String, String> {
    let mut extra = Vec::new();
    for kind in DeviationKind::ALL {
        let line = fault_case(kind)?;
        if !line.ends_with(" 1 total") {
            extra.push(line);
        }
    }
    Ok(if extra.is_empty() {
        "6 kinds, each exactly one deviation and nothing else".to_string()
    } else {
        format!("6 kinds detected; extra non-critical: {}", extra.join("; "))
    })
}
