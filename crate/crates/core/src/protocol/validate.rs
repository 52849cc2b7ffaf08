use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Protocol, UNKNOWN_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev} at {}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues
            .iter()
            .filter(|i| i.severity == Severity::Warning)
    }
}

#[derive(Default)]
struct Collector {
    issues: Vec<Issue>,
}

impl Collector {
    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            severity: Severity::Error,
            path: path.into(),
            message: message.into(),
        });
    }

    fn warning(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            severity: Severity::Warning,
            path: path.into(),
            message: message.into(),
        });
    }

    fn finish(self) -> ValidationReport {
        let ok = !self.issues.iter().any(|i| i.severity == Severity::Error);
        ValidationReport {
            ok,
            issues: self.issues,
        }
    }
}

/// Checks every protocol invariant. Violations are report entries, never
/// failures; `ok` is true iff no entry has error severity.
pub fn validate_protocol(p: &Protocol) -> ValidationReport {
    let mut c = Collector::default();

    if p.id.trim().is_empty() {
        c.error("id", "protocol id must be non-empty");
    }
    if p.version.trim().is_empty() {
        c.error("version", "version must be non-empty");
    }

    let mut materials = BTreeSet::new();
    for (k, m) in p.materials.iter().enumerate() {
        if m.trim().is_empty() {
            c.error(format!("materials[{k}]"), "material name must be non-empty");
        } else if !materials.insert(m.as_str()) {
            c.warning(
                format!("materials[{k}]"),
                format!("material {m:?} listed twice"),
            );
        }
    }

    if p.steps.is_empty() {
        c.error("steps", "protocol must contain at least one step");
    }

    let mut ids = HashSet::new();
    for (i, step) in p.steps.iter().enumerate() {
        let at = |field: &str| format!("steps[{i}].{field}");

        if step.index != i {
            c.error(
                at("index"),
                format!("step index {} does not match position {i}", step.index),
            );
        }
        if step.id.trim().is_empty() {
            c.error(at("id"), "step id must be non-empty");
        } else if !ids.insert(step.id.as_str()) {
            c.error(at("id"), format!("duplicate step id {:?}", step.id));
        }
        if step.action_label.trim().is_empty() {
            c.error(at("action_label"), "action_label must be non-empty");
        } else if step.action_label == UNKNOWN_LABEL {
            c.error(
                at("action_label"),
                format!("{UNKNOWN_LABEL:?} is reserved for unclassified observations"),
            );
        }

        let w = step.expected_duration_ms;
        if w.max == 0 {
            c.error(at("expected_duration_ms"), "max duration must be positive");
        } else if w.min > w.max {
            c.error(
                at("expected_duration_ms"),
                format!("min {} exceeds max {}", w.min, w.max),
            );
        }

        for (k, m) in step.required_materials.iter().enumerate() {
            if !materials.contains(m.as_str()) {
                c.error(
                    format!("steps[{i}].required_materials[{k}]"),
                    format!("material {m:?} is not declared in protocol materials"),
                );
            }
        }

        let mut keys = HashSet::new();
        for (k, param) in step.parameters.iter().enumerate() {
            let at = |field: &str| format!("steps[{i}].parameters[{k}].{field}");
            if param.name.trim().is_empty() {
                c.error(at("name"), "parameter name must be non-empty");
            }
            if param.unit.trim().is_empty() {
                c.error(at("unit"), "parameter unit must be non-empty");
            }
            if !param.expected.is_finite() {
                c.error(at("expected"), "expected value must be finite");
            }
            if !(param.tolerance.is_finite() && param.tolerance >= 0.0) {
                c.error(
                    at("tolerance"),
                    "tolerance must be a finite non-negative number",
                );
            }
            if !keys.insert((param.name.as_str(), param.unit.as_str())) {
                c.error(
                    at("name"),
                    format!(
                        "parameter {:?} [{}] specified twice",
                        param.name, param.unit
                    ),
                );
            }
        }

        if i > 0 && p.steps[i - 1].action_label == step.action_label {
            c.warning(
                at("action_label"),
                format!(
                    "adjacent steps {} and {i} share action_label {:?}; alignment cannot tell them apart",
                    i - 1,
                    step.action_label
                ),
            );
        }
    }

    c.finish()
}
