//! Online alignment of an observation stream to a protocol's step sequence.
//!
//! The model is a left-to-right HMM over the protocol steps plus one OFF state
//! for off-protocol activity, decoded with Viterbi in the log domain. See
//! [`AlignmentState`] for the live decoder and [`brute_force_align`] for the
//! exhaustive reference used in tests.

mod brute;
mod engine;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use brute::{brute_force_align, BRUTE_FORCE_LIMIT};
pub use engine::AlignmentState;

/// An alignment state: a protocol step or off-protocol activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StateId {
    Step(usize),
    Off,
}

pub const OFF_LABEL: &str = "off_protocol";

impl StateId {
    pub fn step(self) -> Option<usize> {
        match self {
            StateId::Step(i) => Some(i),
            StateId::Off => None,
        }
    }

    pub fn is_off(self) -> bool {
        matches!(self, StateId::Off)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateId::Step(i) => write!(f, "step {i}"),
            StateId::Off => f.write_str(OFF_LABEL),
        }
    }
}

// Steps serialize as their index, OFF as the string "off_protocol".
impl Serialize for StateId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StateId::Step(i) => s.serialize_u64(*i as u64),
            StateId::Off => s.serialize_str(OFF_LABEL),
        }
    }
}

impl<'de> Deserialize<'de> for StateId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Label(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(StateId::Step(i as usize)),
            Raw::Label(l) if l == OFF_LABEL => Ok(StateId::Off),
            Raw::Label(l) => Err(serde::de::Error::custom(format!(
                "expected a step index or {OFF_LABEL:?}, got {l:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Emission probability of an observation whose label does not match the step.
    pub mismatch_floor: f64,
    /// Emission probability of any observation in the OFF state.
    pub off_emission: f64,
    /// Log-penalty per step jumped over.
    pub skip_penalty: f64,
    /// Log-penalty for moving back to any earlier step.
    pub regress_penalty: f64,
    /// Log-penalty for entering or leaving OFF.
    pub off_penalty: f64,
    pub confidence_floor: f64,
    /// Hysteresis on the reported state. Zero follows the argmax exactly.
    pub report_margin: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            mismatch_floor: 1e-3,
            off_emission: 1e-2,
            skip_penalty: 10f64.ln(),
            regress_penalty: 100f64.ln(),
            off_penalty: 50f64.ln(),
            confidence_floor: 1e-6,
            report_margin: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field} must lie in (0, 1), got {value}")]
    NotAProbability { field: &'static str, value: f64 },
    #[error("{field} must be finite and non-negative, got {value}")]
    NegativePenalty { field: &'static str, value: f64 },
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("mismatch_floor", self.mismatch_floor),
            ("off_emission", self.off_emission),
            ("confidence_floor", self.confidence_floor),
        ] {
            if !(value > 0.0 && value < 1.0) {
                return Err(ConfigError::NotAProbability { field, value });
            }
        }
        for (field, value) in [
            ("skip_penalty", self.skip_penalty),
            ("regress_penalty", self.regress_penalty),
            ("off_penalty", self.off_penalty),
            ("report_margin", self.report_margin),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ConfigError::NegativePenalty { field, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlignError {
    #[error("observation at {t_ms} ms precedes previous observation at {previous_ms} ms")]
    NonMonotoneTimestamp { t_ms: u64, previous_ms: u64 },
    #[error("no observations were ingested")]
    EmptySession,
    #[error(
        "brute-force instance too large: {states}^{observations} paths exceeds {BRUTE_FORCE_LIMIT}"
    )]
    InstanceTooLarge { states: usize, observations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: usize,
    pub t_ms: u64,
}

/// Result of ingesting one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentUpdate {
    /// Zero-based position of the observation in the session stream.
    pub obs_index: u64,
    pub t_ms: u64,
    /// State shown to the operator (argmax, subject to `report_margin`).
    pub reported_state: StateId,
    /// End state of the current MAP path.
    pub map_state: StateId,
    /// State the MAP path occupied at the previous observation, if any.
    pub map_predecessor: Option<StateId>,
    pub map_logscore: f64,
    pub state_changed: bool,
    /// Set when the MAP path enters a step at this observation.
    pub tentative_step_entry: Option<StepEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub state: StateId,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
}

impl Interval {
    pub fn duration_ms(&self) -> u64 {
        self.t_end_ms - self.t_start_ms
    }
}

/// The decoded MAP path as a partition of `[first observation, session end]`
/// into per-state intervals.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepSegmentation {
    pub intervals: Vec<Interval>,
}

impl StepSegmentation {
    pub fn step_intervals(&self) -> impl Iterator<Item = (usize, &Interval)> {
        self.intervals
            .iter()
            .filter_map(|iv| iv.state.step().map(|s| (s, iv)))
    }

    pub fn off_intervals(&self) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(|iv| iv.state.is_off())
    }
}
