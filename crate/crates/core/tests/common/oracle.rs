//! Randomized instances for the decoder-versus-exhaustive-search check.

use std::sync::Arc;
use std::time::{Duration, Instant};

use benchmate_core::alignment::{brute_force_align, AlignmentConfig, AlignmentState, StateId};
use benchmate_core::perception::Observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{obs, protocol_with_labels};

pub const ORACLE_SEED: u64 = 0x5eed_a11c;
pub const ORACLE_CASES: usize = 200;

pub struct Instance {
    pub labels: Vec<String>,
    pub stream: Vec<Observation>,
    pub config: AlignmentConfig,
}

/// Half the instances draw from small discrete value sets so that exact score
/// ties (and therefore the tie-break order) are exercised.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=6usize);
    let t = rng.random_range(1..=8usize);
    let discrete = rng.random_bool(0.5);

    let vocab = ["mix", "pipette", "spin", "incubate", "wash"];
    let labels: Vec<String> = (0..n)
        .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
        .collect();

    let config = if discrete {
        let pick = |rng: &mut ChaCha8Rng, xs: &[f64]| xs[rng.random_range(0..xs.len())];
        AlignmentConfig {
            mismatch_floor: pick(rng, &[1e-3, 0.1, 0.5]),
            off_emission: pick(rng, &[1e-2, 0.1, 0.5]),
            skip_penalty: pick(rng, &[0.0, 1.0, 10f64.ln()]),
            regress_penalty: pick(rng, &[0.0, 1.0, 100f64.ln()]),
            off_penalty: pick(rng, &[0.0, 1.0, 50f64.ln()]),
            confidence_floor: 1e-6,
            report_margin: 0.0,
        }
    } else {
        AlignmentConfig {
            mismatch_floor: rng.random_range(1e-4..0.5),
            off_emission: rng.random_range(1e-4..0.5),
            skip_penalty: rng.random_range(0.0..5.0),
            regress_penalty: rng.random_range(0.0..8.0),
            off_penalty: rng.random_range(0.0..6.0),
            confidence_floor: rng.random_range(1e-8..1e-2),
            report_margin: 0.0,
        }
    };

    let mut time = 0u64;
    let stream = (0..t)
        .map(|_| {
            time += rng.random_range(0..3_000u64);
            let label = if rng.random_bool(0.15) {
                "unknown"
            } else {
                vocab[rng.random_range(0..vocab.len())]
            };
            let confidence = if discrete {
                [0.5, 0.9, 1.0][rng.random_range(0..3)]
            } else {
                rng.random_range(0.0..=1.0)
            };
            obs(time, label, confidence)
        })
        .collect();

    Instance {
        labels,
        stream,
        config,
    }
}

pub fn decode(
    labels: &[String],
    stream: &[Observation],
    config: AlignmentConfig,
) -> (Vec<StateId>, f64) {
    let mut engine = AlignmentState::new(Arc::new(protocol_with_labels(labels)), config);
    for o in stream {
        engine.ingest(o).unwrap();
    }
    engine.map_path().unwrap()
}

/// Runs `cases` instances; fails on the first score or path difference.
pub fn oracle_equivalence(seed: u64, cases: usize) -> Result<Duration, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let inst = random_instance(&mut rng);
        let protocol = protocol_with_labels(&inst.labels);
        let (oracle_path, oracle_score) =
            brute_force_align(&protocol, &inst.stream, &inst.config).map_err(|e| e.to_string())?;
        let (path, score) = decode(&inst.labels, &inst.stream, inst.config);
        if score.to_bits() != oracle_score.to_bits() {
            return Err(format!(
                "case {case}: score {score} vs oracle {oracle_score}"
            ));
        }
        if path != oracle_path {
            return Err(format!(
                "case {case}: path {path:?} vs oracle {oracle_path:?}"
            ));
        }
    }
    Ok(started.elapsed())
}
