//! Exhaustive reference decoder.
//!
//! Enumerates every state path and scores it with the same transition and
//! emission rules as the online decoder, written out independently: every term
//! is rounded to a multiple of 2^-32 nats and summed left to right, so MAP
//! scores agree bit for bit.

use std::cmp::Ordering;

use super::{AlignError, AlignmentConfig, StateId};
use crate::perception::Observation;
use crate::protocol::Protocol;

/// Upper bound on the number of enumerated paths.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

pub fn brute_force_align(
    protocol: &Protocol,
    observations: &[Observation],
    config: &AlignmentConfig,
) -> Result<(Vec<StateId>, f64), AlignError> {
    let n = protocol.steps.len();
    let states = n + 1;
    let t = observations.len();
    if t == 0 {
        return Err(AlignError::EmptySession);
    }
    let too_large = AlignError::InstanceTooLarge {
        states,
        observations: t,
    };
    let total = (0..t).try_fold(1u64, |acc, _| {
        acc.checked_mul(states as u64)
            .filter(|&v| v <= BRUTE_FORCE_LIMIT)
    });
    let Some(total) = total else {
        return Err(too_large);
    };

    let grid = |x: f64| (x * 4_294_967_296.0).round() / 4_294_967_296.0;
    let label_of = |s: usize| protocol.steps[s].action_label.as_str();
    let emit = |s: usize, o: &Observation| -> f64 {
        grid(if s == n {
            config.off_emission.ln()
        } else if o.action_label == label_of(s) {
            o.confidence.max(config.confidence_floor).ln()
        } else {
            config.mismatch_floor.ln()
        })
    };
    let prior = |s: usize| -> f64 {
        if s == 0 {
            0.0
        } else if s == n {
            grid(-config.off_penalty)
        } else {
            grid(-(config.skip_penalty * s as f64))
        }
    };
    let step_cost = |from: usize, to: usize| -> f64 {
        if from == to {
            0.0
        } else if from == n || to == n {
            grid(-config.off_penalty)
        } else if to == from + 1 {
            0.0
        } else if to > from {
            grid(-((to - from - 1) as f64 * config.skip_penalty))
        } else {
            grid(-config.regress_penalty)
        }
    };

    // Terms are tabulated once; the enumeration below visits every path
    // depth first, extending a left-to-right running sum per prefix.
    let emits: Vec<Vec<f64>> = observations
        .iter()
        .map(|o| (0..states).map(|s| emit(s, o)).collect())
        .collect();
    let costs: Vec<Vec<f64>> = (0..states)
        .map(|from| (0..states).map(|to| step_cost(from, to)).collect())
        .collect();
    let starts: Vec<f64> = (0..states).map(|s| prior(s) + emits[0][s]).collect();

    let mut search = Search {
        emits: &emits,
        costs: &costs,
        off: n,
        path: vec![0usize; t],
        best_path: vec![0usize; t],
        best_score: f64::NEG_INFINITY,
        leaves: 0,
    };
    for (s, &score) in starts.iter().enumerate() {
        search.path[0] = s;
        search.extend(1, score);
    }
    debug_assert_eq!(search.leaves, total);
    let (best_path, best_score) = (search.best_path, search.best_score);

    let decoded = best_path
        .into_iter()
        .map(|s| {
            if s == n {
                StateId::Off
            } else {
                StateId::Step(s)
            }
        })
        .collect();
    Ok((decoded, best_score))
}

struct Search<'a> {
    emits: &'a [Vec<f64>],
    costs: &'a [Vec<f64>],
    off: usize,
    path: Vec<usize>,
    best_path: Vec<usize>,
    best_score: f64,
    leaves: u64,
}

impl Search<'_> {
    fn extend(&mut self, k: usize, score: f64) {
        if k == self.path.len() {
            self.leaves += 1;
            let better = match score.partial_cmp(&self.best_score) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => tie_prefers(&self.path, &self.best_path, self.off),
                _ => false,
            };
            if better {
                self.best_score = score;
                self.best_path.copy_from_slice(&self.path);
            }
            return;
        }
        let prev = self.path[k - 1];
        for s in 0..self.emits[k].len() {
            self.path[k] = s;
            let next = score + self.costs[prev][s] + self.emits[k][s];
            self.extend(k + 1, next);
        }
    }
}

/// Among equal-score paths: the lower final state wins (OFF last); then,
/// walking backwards, the lower-ranked predecessor of the shared successor.
fn tie_prefers(a: &[usize], b: &[usize], off: usize) -> bool {
    let last = a.len() - 1;
    if a[last] != b[last] {
        return a[last] < b[last];
    }
    for k in (0..last).rev() {
        if a[k] != b[k] {
            let next = a[k + 1];
            return predecessor_rank(a[k], next, off) < predecessor_rank(b[k], next, off);
        }
    }
    false
}

/// stay < advance < skip < regress < OFF-related, lower index first within a kind.
fn predecessor_rank(from: usize, to: usize, off: usize) -> (u8, usize) {
    let kind = if from == to {
        0
    } else if from == off || to == off {
        4
    } else if to == from + 1 {
        1
    } else if to > from {
        2
    } else {
        3
    };
    (kind, from)
}
