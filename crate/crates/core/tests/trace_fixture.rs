//! Golden record of the trace generator for seed 42.
//!
//! `fixtures/trace_seed42.json` holds the first raw ChaCha8 outputs, the
//! uniforms and Erlang(2, 5) draws derived from them, and a full trace.
//! Regenerate with `EDGESCHED_BLESS=1 cargo test --test trace_fixture`.

use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use edgesched::harness::io::{trace_from_json, trace_to_json};
use edgesched::harness::trace::{default_pool, TraceRng};
use edgesched::harness::{gen_trace, ArrivalModel, TraceConfig};

#[derive(Serialize, Deserialize)]
struct Golden {
    generator: String,
    seed: u64,
    raw_u64: Vec<u64>,
    uniform: Vec<f64>,
    gamma_k2_theta5: Vec<f64>,
    trace: serde_json::Value,
}

const SEED: u64 = 42;
const N: usize = 16;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/trace_seed42.json")
}

fn config() -> TraceConfig {
    TraceConfig {
        seed: SEED,
        num_requests: 12,
        mean_period_us: 150_000.0,
        mean_deadline_us: 150_000.0,
        arrival: ArrivalModel::Exponential { mean_us: 100_000.0 },
        frames_per_request: 50,
        nonrt_fraction: 0.25,
        categories: default_pool(),
        ..TraceConfig::default()
    }
}

fn current() -> Golden {
    let mut raw = ChaCha8Rng::seed_from_u64(SEED);
    let raw_u64: Vec<u64> = (0..2 * N).map(|_| raw.next_u64()).collect();
    let mut rng = TraceRng::new(SEED);
    let uniform: Vec<f64> = (0..2 * N).map(|_| rng.uniform()).collect();
    let mut rng = TraceRng::new(SEED);
    let gamma: Vec<f64> = (0..N).map(|_| rng.gamma(2.0, 5.0)).collect();
    let trace = gen_trace(&config()).unwrap();
    Golden {
        generator: "ChaCha8Rng::seed_from_u64; u = ((x >> 11) + 1) * 2^-53; \
                    Gamma(k integer, theta) = theta * sum of k draws of -ln u"
            .into(),
        seed: SEED,
        raw_u64,
        uniform,
        gamma_k2_theta5: gamma,
        trace: serde_json::from_str(&trace_to_json(&trace).unwrap()).unwrap(),
    }
}

#[test]
fn matches_golden_record() {
    let now = current();
    if std::env::var_os("EDGESCHED_BLESS").is_some() {
        std::fs::write(fixture_path(), serde_json::to_string_pretty(&now).unwrap() + "\n").unwrap();
    }
    let golden: Golden = serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap();
    assert_eq!(now.raw_u64, golden.raw_u64);
    assert_eq!(now.uniform, golden.uniform);
    assert_eq!(now.gamma_k2_theta5, golden.gamma_k2_theta5);
    let expected = trace_from_json(&golden.trace.to_string()).unwrap();
    assert_eq!(gen_trace(&config()).unwrap(), expected);
}

#[test]
fn documented_formulas_reproduce_the_draws() {
    let golden: Golden = serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap();
    for (x, u) in golden.raw_u64.iter().zip(&golden.uniform) {
        assert_eq!(((x >> 11) + 1) as f64 / 9_007_199_254_740_992.0, *u);
    }
    for (i, g) in golden.gamma_k2_theta5.iter().enumerate() {
        let (a, b) = (golden.uniform[2 * i], golden.uniform[2 * i + 1]);
        assert_eq!(5.0 * (-a.ln() + -b.ln()), *g);
    }
}
