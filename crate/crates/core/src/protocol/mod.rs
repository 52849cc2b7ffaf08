//! Gold-standard protocol representation.
//!
//! A [`Protocol`] is a strictly linear sequence of [`Step`]s. Every other part
//! of the engine consumes protocols read-only, so values are shared behind
//! `Arc` once parsed and validated.

mod format;
mod validate;

use serde::{Deserialize, Serialize};

pub use format::{parse_protocol, protocol_hash, to_document, ProtocolError};
pub use validate::{validate_protocol, Issue, Severity, ValidationReport};

/// Label reserved for observations the perception backend could not classify.
/// It is never a valid step label.
pub const UNKNOWN_LABEL: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub id: String,
    pub title: String,
    pub version: String,
    pub materials: Vec<String>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub index: usize,
    pub id: String,
    pub name: String,
    pub action_label: String,
    pub description: String,
    pub expected_duration_ms: DurationWindow,
    pub required_materials: Vec<String>,
    pub parameters: Vec<ParameterSpec>,
    pub requires_sterile: bool,
    pub skippable: bool,
}

/// Closed interval of acceptable step durations, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationWindow {
    pub min: u64,
    pub max: u64,
}

impl DurationWindow {
    pub fn new(min: u64, max: u64) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub unit: String,
    pub expected: f64,
    /// Absolute tolerance in `unit`.
    pub tolerance: f64,
}

impl Protocol {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: usize) -> Option<&Step> {
        self.steps.get(index)
    }

    /// Indices of every step carrying `label`, in protocol order.
    pub fn steps_with_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.steps
            .iter()
            .filter(move |s| s.action_label == label)
            .map(|s| s.index)
    }

    pub fn step_by_id(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn step(index: usize, label: &str, window: (u64, u64)) -> Step {
        Step {
            index,
            id: format!("s{index}"),
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

    pub fn linear(n: usize) -> Protocol {
        Protocol {
            id: format!("linear-{n}"),
            title: format!("Linear protocol with {n} steps"),
            version: "1".into(),
            materials: Vec::new(),
            steps: (0..n)
                .map(|i| step(i, &format!("action_{i}"), (1_000, 60_000)))
                .collect(),
        }
    }
}
