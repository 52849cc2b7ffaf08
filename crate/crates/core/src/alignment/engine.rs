use std::sync::Arc;

use super::{
    AlignError, AlignmentConfig, AlignmentUpdate, Interval, StateId, StepEntry, StepSegmentation,
};
use crate::perception::Observation;
use crate::protocol::Protocol;

/// Transition kinds in tie-break order: on equal scores the earlier kind wins,
/// and within a kind the lower predecessor index wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Move {
    Stay,
    Advance,
    Skip,
    Regress,
    OffRelated,
}

/// Log-scores live on a grid of 2^-32 nats. Sums of grid values are exact in
/// f64 (up to about 2^21 nats), so path scores do not depend on summation order
/// and equal-score ties are real ties.
const GRID: f64 = 4_294_967_296.0;

pub(crate) fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

/// Live Viterbi decoder for one session.
///
/// State `n` (one past the last step) is OFF. The column holds the best
/// log-score of any path ending in each state after the last observation.
pub struct AlignmentState {
    protocol: Arc<Protocol>,
    config: AlignmentConfig,
    ln_mismatch: f64,
    ln_off: f64,
    column: Vec<f64>,
    /// Per observation, the chosen predecessor of every state. Empty for the
    /// first observation, which has no predecessor.
    backpointers: Vec<Vec<u32>>,
    /// Time the best path ending in each state entered that state.
    entered_at: Vec<u64>,
    times: Vec<u64>,
    reported: usize,
}

impl AlignmentState {
    /// Column starts at: step 0 = 0, step k = -k * skip, OFF = -off.
    pub fn new(protocol: Arc<Protocol>, config: AlignmentConfig) -> Self {
        let n = protocol.steps.len();
        assert!(n > 0, "protocols have at least one step");
        let mut column = Vec::with_capacity(n + 1);
        column.push(0.0);
        for k in 1..n {
            column.push(snap(-(config.skip_penalty * k as f64)));
        }
        column.push(snap(-config.off_penalty));
        Self {
            ln_mismatch: snap(config.mismatch_floor.ln()),
            ln_off: snap(config.off_emission.ln()),
            protocol,
            config,
            column,
            backpointers: Vec::new(),
            entered_at: vec![0; n + 1],
            times: Vec::new(),
            reported: 0,
        }
    }

    pub fn protocol(&self) -> &Arc<Protocol> {
        &self.protocol
    }

    pub fn config(&self) -> &AlignmentConfig {
        &self.config
    }

    pub fn observation_count(&self) -> usize {
        self.times.len()
    }

    pub fn column(&self) -> &[f64] {
        &self.column
    }

    pub fn reported_state(&self) -> StateId {
        self.state_id(self.reported)
    }

    /// When the best path ending in `state` entered it. `None` before any
    /// observation.
    pub fn entered_at(&self, state: StateId) -> Option<u64> {
        if self.times.is_empty() {
            return None;
        }
        Some(self.entered_at[self.index_of(state)])
    }

    fn off(&self) -> usize {
        self.protocol.steps.len()
    }

    fn state_id(&self, s: usize) -> StateId {
        if s == self.off() {
            StateId::Off
        } else {
            StateId::Step(s)
        }
    }

    fn index_of(&self, s: StateId) -> usize {
        match s {
            StateId::Step(i) => i,
            StateId::Off => self.off(),
        }
    }

    fn emission(&self, s: usize, o: &Observation) -> f64 {
        if s == self.off() {
            self.ln_off
        } else if self.protocol.steps[s].action_label == o.action_label {
            snap(o.confidence.max(self.config.confidence_floor).ln())
        } else {
            self.ln_mismatch
        }
    }

    fn transition(&self, from: usize, to: usize) -> (f64, Move) {
        let off = self.off();
        if from == to {
            (0.0, Move::Stay)
        } else if from == off || to == off {
            (snap(-self.config.off_penalty), Move::OffRelated)
        } else if to == from + 1 {
            (0.0, Move::Advance)
        } else if to > from {
            (
                snap(-((to - from - 1) as f64 * self.config.skip_penalty)),
                Move::Skip,
            )
        } else {
            (snap(-self.config.regress_penalty), Move::Regress)
        }
    }

    /// Lowest state index among the column maxima.
    fn argmax(&self) -> usize {
        let mut best = 0;
        for (s, &v) in self.column.iter().enumerate().skip(1) {
            if v > self.column[best] {
                best = s;
            }
        }
        best
    }

    pub fn ingest(&mut self, o: &Observation) -> Result<AlignmentUpdate, AlignError> {
        if let Some(&previous_ms) = self.times.last() {
            if o.t_ms < previous_ms {
                return Err(AlignError::NonMonotoneTimestamp {
                    t_ms: o.t_ms,
                    previous_ms,
                });
            }
        }
        let states = self.column.len();
        let first = self.times.is_empty();
        let mut next = vec![0.0; states];
        let mut entered = vec![o.t_ms; states];

        if first {
            for (s, slot) in next.iter_mut().enumerate() {
                *slot = self.column[s] + self.emission(s, o);
            }
        } else {
            let mut row = vec![0u32; states];
            for to in 0..states {
                let mut best_from = to;
                let mut best_score = self.column[to];
                let mut best_rank = (Move::Stay, to);
                for from in 0..states {
                    if from == to {
                        continue;
                    }
                    let (cost, kind) = self.transition(from, to);
                    let score = self.column[from] + cost;
                    let rank = (kind, from);
                    if score > best_score || (score == best_score && rank < best_rank) {
                        best_from = from;
                        best_score = score;
                        best_rank = rank;
                    }
                }
                next[to] = best_score + self.emission(to, o);
                row[to] = best_from as u32;
                if best_from == to {
                    entered[to] = self.entered_at[to];
                }
            }
            self.backpointers.push(row);
        }

        self.column = next;
        self.entered_at = entered;
        self.times.push(o.t_ms);

        let map = self.argmax();
        let previous_report = self.reported;
        let margin = self.config.report_margin;
        if margin == 0.0 || self.column[map] > self.column[previous_report] + margin {
            self.reported = map;
        }

        let map_predecessor = self
            .backpointers
            .last()
            .filter(|_| !first)
            .map(|row| self.state_id(row[map] as usize));
        let map_state = self.state_id(map);
        let tentative_step_entry = match map_state {
            StateId::Step(step) if map_predecessor != Some(map_state) => {
                Some(StepEntry { step, t_ms: o.t_ms })
            }
            _ => None,
        };

        Ok(AlignmentUpdate {
            obs_index: (self.times.len() - 1) as u64,
            t_ms: o.t_ms,
            reported_state: self.state_id(self.reported),
            map_state,
            map_predecessor,
            map_logscore: self.column[map],
            state_changed: self.reported != previous_report,
            tentative_step_entry,
        })
    }

    /// Current global MAP path and its log-score.
    pub fn map_path(&self) -> Result<(Vec<StateId>, f64), AlignError> {
        if self.times.is_empty() {
            return Err(AlignError::EmptySession);
        }
        let t = self.times.len();
        let mut s = self.argmax();
        let score = self.column[s];
        let mut path = vec![0usize; t];
        path[t - 1] = s;
        for k in (1..t).rev() {
            s = self.backpointers[k - 1][s] as usize;
            path[k - 1] = s;
        }
        Ok((path.into_iter().map(|s| self.state_id(s)).collect(), score))
    }

    /// Backtraces the MAP path and cuts it into intervals. Boundaries sit at
    /// the midpoint between adjacent observations in different states; the
    /// first interval opens at the first observation and the last closes at
    /// `session_end_ms` (or the last observation, if later).
    pub fn finalize(&self, session_end_ms: u64) -> Result<StepSegmentation, AlignError> {
        let (path, _) = self.map_path()?;
        let times = &self.times;
        let end = session_end_ms.max(*times.last().expect("non-empty"));
        let mut intervals: Vec<Interval> = Vec::new();
        let mut start = times[0];
        for k in 1..path.len() {
            if path[k] != path[k - 1] {
                let cut = times[k - 1] + (times[k] - times[k - 1]) / 2;
                intervals.push(Interval {
                    state: path[k - 1],
                    t_start_ms: start,
                    t_end_ms: cut,
                });
                start = cut;
            }
        }
        intervals.push(Interval {
            state: *path.last().expect("non-empty"),
            t_start_ms: start,
            t_end_ms: end,
        });
        Ok(StepSegmentation { intervals })
    }
}
