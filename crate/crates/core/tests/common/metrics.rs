//! Strategies and property checks for the matching metrics, shared by the
//! property tests and the acceptance run.

use benchmate_core::eval::{match_segments, score_errors, Matching, Span};
use proptest::prelude::*;

const LABELS: [&str; 3] = ["a", "b", "c"];

/// Non-overlapping spans on a coarse grid so ties and exact boundaries occur.
pub fn segment_list() -> impl Strategy<Value = Vec<Span>> {
    prop::collection::vec((0usize..3, 0u64..4, 1u64..5), 0..8).prop_map(|parts| {
        let mut t = 0;
        parts
            .into_iter()
            .map(|(l, gap, len)| {
                let start = t + gap * 10;
                t = start + len * 10;
                Span::new(LABELS[l], start, t)
            })
            .collect()
    })
}

/// Possibly overlapping, possibly duplicated events.
pub fn event_list() -> impl Strategy<Value = Vec<Span>> {
    prop::collection::vec((0usize..2, 0u64..8, 0u64..3), 0..8).prop_map(|parts| {
        parts
            .into_iter()
            .map(|(l, at, len)| Span::new(LABELS[l], at * 5_000, at * 5_000 + len * 1_000))
            .collect()
    })
}

pub fn iou_threshold() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.5), Just(1.0), 0.05f64..=1.0]
}

pub fn window_ms() -> impl Strategy<Value = u64> {
    prop_oneof![Just(10_000u64), 0u64..30_000]
}

fn swapped(ab: &Matching, ba: &Matching) -> Result<(), TestCaseError> {
    prop_assert_eq!(ab.rates.precision, ba.rates.recall);
    prop_assert_eq!(ab.rates.recall, ba.rates.precision);
    prop_assert_eq!(ab.rates.f1, ba.rates.f1);
    prop_assert_eq!(ab.pairs.len(), ba.pairs.len());
    Ok(())
}

pub fn segments_symmetric(a: &[Span], b: &[Span], iou: f64) -> Result<(), TestCaseError> {
    swapped(&match_segments(a, b, iou), &match_segments(b, a, iou))
}

pub fn errors_symmetric(a: &[Span], b: &[Span], w: u64) -> Result<(), TestCaseError> {
    swapped(&score_errors(a, b, w), &score_errors(b, a, w))
}

/// Appends one identical span to both sides, after everything else.
fn with_correct_pair(pred: &[Span], gold: &[Span], label: &str) -> (Vec<Span>, Vec<Span>) {
    let end = pred
        .iter()
        .chain(gold)
        .map(|s| s.t_end_ms)
        .max()
        .unwrap_or(0);
    let extra = Span::new(label, end + 10, end + 30);
    let mut p = pred.to_vec();
    let mut g = gold.to_vec();
    p.push(extra.clone());
    g.push(extra);
    (p, g)
}

pub fn segments_monotone(
    pred: &[Span],
    gold: &[Span],
    iou: f64,
    at: usize,
) -> Result<(), TestCaseError> {
    let base = match_segments(pred, gold, iou).rates;
    let (p, g) = with_correct_pair(pred, gold, LABELS[at % 3]);
    prop_assert!(match_segments(&p, &g, iou).rates.f1 >= base.f1);

    let end = pred
        .iter()
        .chain(gold)
        .map(|s| s.t_end_ms)
        .max()
        .unwrap_or(0);
    let mut p = pred.to_vec();
    p.insert(at.min(p.len()), Span::new("unmatched", end + 10, end + 20));
    prop_assert!(match_segments(&p, gold, iou).rates.precision <= base.precision);
    Ok(())
}

pub fn errors_monotone(
    pred: &[Span],
    gold: &[Span],
    w: u64,
    at: usize,
) -> Result<(), TestCaseError> {
    let base = score_errors(pred, gold, w).rates;
    // A correct detection may land anywhere, including on top of others.
    let t = (at as u64 % 8) * 5_000;
    let extra = Span::new(LABELS[at % 2], t, t + 1_000);
    let (mut p, mut g) = (pred.to_vec(), gold.to_vec());
    p.insert(at.min(p.len()), extra.clone());
    g.insert((at / 2).min(g.len()), extra);
    prop_assert!(score_errors(&p, &g, w).rates.f1 >= base.f1);

    let mut p = pred.to_vec();
    p.insert(at.min(p.len()), Span::new("unmatched", t, t));
    prop_assert!(score_errors(&p, gold, w).rates.precision <= base.precision);
    Ok(())
}
