//! Miss rate, overdue distribution, and throughput of a finished run.

use std::collections::BTreeMap;

use crate::model::{Duration, LatencyRecord, RequestId, Time};

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub policy: String,
    pub frames: u64,
    pub missed: u64,
    /// `missed / frames`, or 0 with no frames.
    pub miss_rate: f64,
    pub makespan_us: Duration,
    /// Frames per simulated second over the makespan.
    pub throughput_fps: f64,
    pub admitted: usize,
    pub rejected_phase1: usize,
    pub rejected_phase2: usize,
    pub peak_concurrency: usize,
    /// Empirical CDF of overdue time over missed frames: `(overdue_us, fraction <= it)`.
    pub overdue_cdf: Vec<(Duration, f64)>,
    /// Sorted by request id, then sequence number.
    pub records: Vec<LatencyRecord>,
}

pub fn compute_metrics(mut records: Vec<LatencyRecord>) -> Metrics {
    records.sort_by_key(|r| (r.request_id, r.seq));
    let frames = records.len() as u64;
    let missed = records.iter().filter(|r| r.missed).count() as u64;
    let makespan_us = match (
        records.iter().map(|r| r.release_us).min(),
        records.iter().map(|r| r.finish_us).max(),
    ) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    Metrics {
        policy: String::new(),
        frames,
        missed,
        miss_rate: if frames == 0 { 0.0 } else { missed as f64 / frames as f64 },
        makespan_us,
        throughput_fps: if makespan_us == 0 {
            0.0
        } else {
            frames as f64 * 1e6 / makespan_us as f64
        },
        admitted: 0,
        rejected_phase1: 0,
        rejected_phase2: 0,
        peak_concurrency: peak_concurrency(&records),
        overdue_cdf: overdue_cdf(&records),
        records,
    }
}

pub fn overdue_cdf(records: &[LatencyRecord]) -> Vec<(Duration, f64)> {
    let mut overdue: Vec<Duration> = records.iter().filter(|r| r.missed).map(|r| r.overdue_us).collect();
    overdue.sort_unstable();
    let n = overdue.len() as f64;
    let mut cdf: Vec<(Duration, f64)> = Vec::new();
    for (i, v) in overdue.into_iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match cdf.last_mut() {
            Some(last) if last.0 == v => last.1 = p,
            _ => cdf.push((v, p)),
        }
    }
    cdf
}

/// Nearest-rank quantile of a sample; 0 for an empty sample.
pub fn quantile(values: &mut [Duration], q: f64) -> Duration {
    if values.is_empty() {
        return 0;
    }
    values.sort_unstable();
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Quantile of overdue time over every processed frame, on-time frames
/// counting as 0.
pub fn overdue_quantile(records: &[LatencyRecord], q: f64) -> Duration {
    let mut v: Vec<Duration> = records.iter().map(|r| r.overdue_us).collect();
    quantile(&mut v, q)
}

pub fn latency_quantile(records: &[LatencyRecord], q: f64) -> Duration {
    let mut v: Vec<Duration> = records.iter().map(LatencyRecord::latency_us).collect();
    quantile(&mut v, q)
}

/// Largest number of requests whose frames are in the system at once; a
/// request is in the system from its first release to its last finish.
pub fn peak_concurrency(records: &[LatencyRecord]) -> usize {
    let mut spans: BTreeMap<RequestId, (Time, Time)> = BTreeMap::new();
    for r in records {
        let e = spans.entry(r.request_id).or_insert((r.release_us, r.finish_us));
        e.0 = e.0.min(r.release_us);
        e.1 = e.1.max(r.finish_us);
    }
    // ends sort before starts at the same instant
    let mut events: Vec<(Time, i8)> = spans
        .values()
        .flat_map(|&(a, b)| [(a, 1), (b, -1)])
        .collect();
    events.sort_unstable();
    let (mut cur, mut peak) = (0i64, 0i64);
    for (_, d) in events {
        cur += i64::from(d);
        peak = peak.max(cur);
    }
    peak as usize
}
