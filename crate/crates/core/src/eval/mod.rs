//! Offline scoring of a session against gold annotations: step segmentation
//! (temporal IoU matching), deviation detection (center-distance matching)
//! and a 0-5 composite.
//!
//! `rubric_score` is a computable proxy for an expert 0-5 rubric. It is not a
//! reproduction of any human or model-judged score.

mod gold;
mod report;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::monitor::DeviationKind;

pub use gold::{
    parse_gold, GoldAnnotation, GoldError, GoldEvent, GoldHeader, GoldParameter, GoldSegment,
};
pub use report::{
    score_export, score_session, EventRow, EventStatus, ScoreError, ScoreReport, SegmentRow,
};

pub const DEFAULT_IOU: f64 = 0.5;
pub const DEFAULT_WINDOW_MS: u64 = 10_000;

/// A labeled half-open time span, `[t_start_ms, t_end_ms)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
}

impl Span {
    pub fn new(label: impl Into<String>, t_start_ms: u64, t_end_ms: u64) -> Self {
        Self {
            label: label.into(),
            t_start_ms,
            t_end_ms,
        }
    }

    fn key(&self) -> (u64, u64, &str) {
        (self.t_start_ms, self.t_end_ms, &self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Rates {
    /// An empty side scores 1 against another empty side and 0 otherwise.
    pub fn from_counts(matches: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |m: usize, n: usize, other: usize| match n {
            0 if other == 0 => 1.0,
            0 => 0.0,
            n => m as f64 / n as f64,
        };
        let precision = ratio(matches, predicted, gold);
        let recall = ratio(matches, gold, predicted);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Temporal intersection over union. Two identical empty spans have IoU 1.
pub fn temporal_iou(a: (u64, u64), b: (u64, u64)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(pred index, gold index)` pairs in the order they were accepted.
    pub pairs: Vec<(usize, usize)>,
    pub rates: Rates,
}

/// Orders two candidate pairs by score, then by the unordered pair of spans,
/// so the result does not depend on which side is called "pred".
fn canonical<'a>(a: &'a Span, b: &'a Span) -> ((u64, u64, &'a str), (u64, u64, &'a str)) {
    let (x, y) = (a.key(), b.key());
    if x <= y {
        (x, y)
    } else {
        (y, x)
    }
}

fn greedy<S: PartialOrd>(
    pred: &[Span],
    gold: &[Span],
    score: impl Fn(&Span, &Span) -> Option<S>,
) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            if let Some(s) = score(p, g) {
                candidates.push((s, i, j));
            }
        }
    }
    candidates.sort_by(|(s1, i1, j1), (s2, i2, j2)| {
        s1.partial_cmp(s2)
            .unwrap_or(Ordering::Equal)
            .then_with(|| canonical(&pred[*i1], &gold[*j1]).cmp(&canonical(&pred[*i2], &gold[*j2])))
    });
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !pred_used[i] && !gold_used[j] {
            pred_used[i] = true;
            gold_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Greedy one-to-one matching by descending IoU. A pair is eligible when the
/// labels (step ids) agree and IoU reaches `iou_threshold`.
pub fn match_segments(pred: &[Span], gold: &[Span], iou_threshold: f64) -> Matching {
    let pairs = greedy(pred, gold, |p, g| {
        if p.label != g.label {
            return None;
        }
        let iou = temporal_iou((p.t_start_ms, p.t_end_ms), (g.t_start_ms, g.t_end_ms));
        // Larger IoU sorts first.
        (iou >= iou_threshold).then_some(-iou)
    });
    let rates = Rates::from_counts(pairs.len(), pred.len(), gold.len());
    Matching { pairs, rates }
}

/// Twice the distance between span centers, exact in integers.
fn center_gap2(a: &Span, b: &Span) -> u64 {
    (a.t_start_ms + a.t_end_ms).abs_diff(b.t_start_ms + b.t_end_ms)
}

/// Greedy one-to-one matching by ascending center distance. A pair is
/// eligible when the labels (deviation kinds) agree and the centers lie at
/// most `window_ms` apart.
pub fn score_errors(pred: &[Span], gold: &[Span], window_ms: u64) -> Matching {
    let pairs = greedy(pred, gold, |p, g| {
        let gap2 = center_gap2(p, g);
        (p.label == g.label && gap2 <= 2 * window_ms).then_some(gap2)
    });
    let rates = Rates::from_counts(pairs.len(), pred.len(), gold.len());
    Matching { pairs, rates }
}

/// `5 * (0.5 * seg_f1 + 0.5 * err_f1)`, clamped to [0, 5].
pub fn rubric_score(seg_f1: f64, err_f1: f64) -> f64 {
    (5.0 * (0.5 * seg_f1 + 0.5 * err_f1)).clamp(0.0, 5.0)
}

/// Kendall's tau between two rankings of the same items. `None` with fewer
/// than two items.
pub fn kendall_tau(a: &[u64], b: &[u64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return None;
    }
    let mut s: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            s += (a[i].cmp(&a[j]) as i64) * (b[i].cmp(&b[j]) as i64);
        }
    }
    Some(s as f64 / (n * (n - 1) / 2) as f64)
}

pub fn kind_label(kind: DeviationKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
