//! Gold annotation files: newline-delimited JSON. The first line is a header,
//! every following line is one tagged record:
//!
//! ```text
//! {"type":"header","protocol_id":"cell-passage","session_id":"run-07"}
//! {"type":"segment","step_id":"wash","t_start_ms":0,"t_end_ms":42000}
//! {"type":"error","kind":"sterile_breach","t_start_ms":51000,"t_end_ms":52000,"step_ref":"trypsinize"}
//! {"type":"parameter","step_id":"trypsinize","name":"volume","value":2.0,"unit":"mL"}
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitor::DeviationKind;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldHeader {
    pub protocol_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSegment {
    pub step_id: String,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEvent {
    pub kind: DeviationKind,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldParameter {
    pub step_id: String,
    pub name: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GoldAnnotation {
    pub header: GoldHeader,
    /// Sorted by start time, pairwise non-overlapping.
    pub segments: Vec<GoldSegment>,
    pub events: Vec<GoldEvent>,
    pub parameters: Vec<GoldParameter>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(GoldHeader),
    Segment(GoldSegment),
    Error(GoldEvent),
    Parameter(GoldParameter),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("annotation line {line}: {message}")]
pub struct GoldError {
    pub line: usize,
    pub message: String,
}

pub fn parse_gold(text: &str) -> Result<GoldAnnotation, GoldError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let err = |line, message: String| GoldError { line, message };

    let (n, first) = lines
        .next()
        .ok_or_else(|| err(1, "empty annotation: missing header line".into()))?;
    let header = match serde_json::from_str(first).map_err(|e| err(n, e.to_string()))? {
        Line::Header(h) => h,
        _ => return Err(err(n, "first line must be the header".into())),
    };
    let mut gold = GoldAnnotation {
        header,
        ..GoldAnnotation::default()
    };
    let mut segment_lines = Vec::new();
    for (n, line) in lines {
        match serde_json::from_str(line).map_err(|e| err(n, e.to_string()))? {
            Line::Header(_) => return Err(err(n, "second header".into())),
            Line::Segment(s) => {
                if s.step_id.trim().is_empty() {
                    return Err(err(n, "empty step_id".into()));
                }
                if s.t_end_ms <= s.t_start_ms {
                    return Err(err(
                        n,
                        format!(
                            "t_end_ms {} is not after t_start_ms {}",
                            s.t_end_ms, s.t_start_ms
                        ),
                    ));
                }
                segment_lines.push(n);
                gold.segments.push(s);
            }
            Line::Error(e) => {
                if e.t_end_ms < e.t_start_ms {
                    return Err(err(
                        n,
                        format!(
                            "t_end_ms {} precedes t_start_ms {}",
                            e.t_end_ms, e.t_start_ms
                        ),
                    ));
                }
                gold.events.push(e);
            }
            Line::Parameter(p) => {
                if !p.value.is_finite() {
                    return Err(err(n, "parameter value must be finite".into()));
                }
                gold.parameters.push(p);
            }
        }
    }

    let mut order: Vec<usize> = (0..gold.segments.len()).collect();
    order.sort_by_key(|&k| gold.segments[k].t_start_ms);
    for w in order.windows(2) {
        let (a, b) = (&gold.segments[w[0]], &gold.segments[w[1]]);
        if b.t_start_ms < a.t_end_ms {
            return Err(err(
                segment_lines[w[1]].max(segment_lines[w[0]]),
                format!("segment {} overlaps segment {}", b.step_id, a.step_id),
            ));
        }
    }
    gold.segments = order
        .into_iter()
        .map(|k| gold.segments[k].clone())
        .collect();
    Ok(gold)
}

impl GoldAnnotation {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut push = |l: Line| {
            out.push_str(&serde_json::to_string(&l).expect("annotation lines serialize"));
            out.push('\n');
        };
        push(Line::Header(self.header.clone()));
        self.segments
            .iter()
            .cloned()
            .for_each(|s| push(Line::Segment(s)));
        self.events
            .iter()
            .cloned()
            .for_each(|e| push(Line::Error(e)));
        self.parameters
            .iter()
            .cloned()
            .for_each(|p| push(Line::Parameter(p)));
        out
    }
}
