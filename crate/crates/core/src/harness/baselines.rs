//! Concurrent batching baselines.
//!
//! Each category runs its own model instance: one job at a time per
//! category, jobs of a category in FIFO order. Categories execute
//! concurrently under processor sharing, each progressing at rate `1/c`
//! while `c` categories have a job in flight.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use crate::edf::{CompletionRecord, ExecModel};
use crate::error::{Error, Result};
use crate::harness::engine::{arrival_order, BatchSize, PolicyConfig, SimOutcome};
use crate::harness::metrics::compute_metrics;
use crate::model::{Category, Duration, Frame, JobInstance, LatencyRecord, QueueKey, Request, RequestId, Time};
use crate::profile::ExecutionProfile;

/// Work scale: `lcm(1..=32)`, so that sharing among up to 32 jobs divides
/// evenly and work is tracked exactly.
pub const WORK_SCALE: u128 = 144_403_552_893_600;

/// AIMD batch-size update.
pub fn aimd_step(current: u32, observed_latency_us: Duration, slo_us: Duration, step: u32, factor: f64) -> u32 {
    if observed_latency_us <= slo_us {
        current.saturating_add(step)
    } else {
        ((f64::from(current) * factor).floor() as u32).max(1)
    }
}

/// Smallest batch size `b` with `sum_g rate_g * E_g(b) / b <= 1`, where
/// `rate_g` is the combined frame rate of category `g`; the largest common
/// batch size if none fits.
pub fn auto_batch_size(trace: &[Request], profile: &ExecutionProfile) -> Result<u32> {
    let mut rates: BTreeMap<&Category, f64> = BTreeMap::new();
    for r in trace {
        *rates.entry(&r.category).or_default() += 1.0 / r.period_us as f64;
    }
    let mut max = u32::MAX;
    for c in rates.keys() {
        max = max.min(profile.max_batch(c)?);
    }
    if rates.is_empty() {
        return Ok(1);
    }
    for b in 1..=max {
        let mut load = 0.0;
        for (c, rate) in &rates {
            load += rate * profile.lookup_wcet(c, b)? as f64 / f64::from(b);
        }
        if load <= 1.0 {
            return Ok(b);
        }
    }
    Ok(max)
}

/// BATCH: emits a batch of exactly `size` once that many frames wait.
pub fn batch_policy_dispatch(pending: &mut VecDeque<Frame>, size: usize) -> Option<Vec<Frame>> {
    (pending.len() >= size).then(|| pending.drain(..size).collect())
}

/// BATCH-Delay: emits when `size` frames wait, or everything waiting once
/// the oldest frame has waited `max_delay_us`.
pub fn batch_delay_dispatch(
    pending: &mut VecDeque<Frame>,
    size: usize,
    max_delay_us: Duration,
    now: Time,
) -> Option<Vec<Frame>> {
    if pending.len() >= size {
        return Some(pending.drain(..size).collect());
    }
    let oldest = pending.front()?;
    (oldest.release_us + max_delay_us <= now).then(|| pending.drain(..).collect())
}

struct Running {
    job: JobInstance,
    index: u64,
    emitted_us: Time,
    start_us: Time,
    actual_us: Duration,
    remaining: u128,
}

struct CategoryState {
    pending: VecDeque<Frame>,
    ready: VecDeque<(JobInstance, Time)>,
    running: Option<Running>,
    /// Frames of this category not yet released.
    future: u64,
    max_batch: u32,
    size: u32,
    aimd_batch: u32,
}

enum Rule {
    Aimd {
        slo_us: Option<Duration>,
        step: u32,
        factor: f64,
    },
    Batch,
    BatchDelay {
        max_delay_us: Duration,
    },
}

pub fn run_gps(
    trace: &[Request],
    policy: &PolicyConfig,
    profile: &ExecutionProfile,
    exec: &mut dyn ExecModel,
) -> Result<SimOutcome> {
    let order = arrival_order(trace)?;
    for r in &order {
        r.validate()?;
    }
    let (rule, size) = match *policy {
        PolicyConfig::Aimd {
            slo_us,
            additive_step,
            multiplicative_factor,
        } => (
            Rule::Aimd {
                slo_us,
                step: additive_step,
                factor: multiplicative_factor,
            },
            BatchSize::Fixed(1),
        ),
        PolicyConfig::Batch { size } => (Rule::Batch, size),
        PolicyConfig::BatchDelay { size, max_delay_us } => (Rule::BatchDelay { max_delay_us }, size),
        _ => return Err(Error::InvalidConfig(format!("{policy} is not a processor-sharing baseline"))),
    };
    let size = match size {
        BatchSize::Fixed(s) => s,
        BatchSize::Auto => auto_batch_size(trace, profile)?,
    };

    let mut cats: BTreeMap<Category, CategoryState> = BTreeMap::new();
    for r in &order {
        let max_batch = profile.max_batch(&r.category)?;
        let state = cats.entry(r.category.clone()).or_insert(CategoryState {
            pending: VecDeque::new(),
            ready: VecDeque::new(),
            running: None,
            future: 0,
            max_batch,
            size: size.min(max_batch),
            aimd_batch: 1,
        });
        state.future += u64::from(r.num_frames);
    }
    let by_id: BTreeMap<RequestId, &Request> = order.iter().map(|r| (r.id, *r)).collect();
    let mut cursors: BTreeMap<RequestId, u32> = BTreeMap::new();
    let mut releases: BinaryHeap<Reverse<(Time, RequestId)>> =
        order.iter().map(|r| Reverse((r.first_release_us, r.id))).collect();

    let mut t: Time = 0;
    let mut dispatched: u64 = 0;
    let mut next_job_id = 0u64;
    let mut jobs: Vec<CompletionRecord> = Vec::new();
    let mut records: Vec<LatencyRecord> = Vec::new();

    loop {
        let active = cats.values().filter(|c| c.running.is_some()).count() as u128;
        let completion = cats
            .values()
            .filter_map(|c| c.running.as_ref())
            .map(|r| t + (r.remaining * active).div_ceil(WORK_SCALE) as u64)
            .min();
        let release = releases.peek().map(|Reverse((at, _))| *at);
        let timer = match rule {
            Rule::BatchDelay { max_delay_us } => cats
                .values()
                .filter_map(|c| c.pending.front())
                .map(|f| f.release_us + max_delay_us)
                .min(),
            _ => None,
        };
        let Some(next) = [completion, release, timer].into_iter().flatten().min() else {
            break;
        };

        if active > 0 {
            let progress = u128::from(next - t) * WORK_SCALE / active;
            for r in cats.values_mut().filter_map(|c| c.running.as_mut()) {
                r.remaining = r.remaining.saturating_sub(progress);
            }
        }
        t = next;

        for state in cats.values_mut() {
            if !state.running.as_ref().is_some_and(|r| r.remaining == 0) {
                continue;
            }
            let run = state.running.take().expect("checked above");
            let frames: Vec<LatencyRecord> = run
                .job
                .frames
                .iter()
                .map(|f| LatencyRecord::new(f, by_id[&f.request_id].real_time, run.emitted_us, run.start_us, t))
                .collect();
            if let Rule::Aimd { slo_us, step, factor } = rule {
                let latency = frames.iter().map(LatencyRecord::latency_us).max().unwrap_or(0);
                let slo = slo_us.unwrap_or_else(|| {
                    run.job
                        .frames
                        .iter()
                        .map(|f| by_id[&f.request_id].relative_deadline_us)
                        .min()
                        .unwrap_or(Duration::MAX)
                });
                state.aimd_batch = aimd_step(state.aimd_batch, latency, slo, step, factor).min(state.max_batch);
            }
            records.extend_from_slice(&frames);
            jobs.push(CompletionRecord {
                job_id: run.job.id,
                key: run.job.key.clone(),
                index: run.index,
                release_us: run.emitted_us,
                absolute_deadline_us: run.job.frames.iter().map(|f| f.absolute_deadline_us).min().unwrap_or(t),
                batch_size: run.job.batch_size(),
                start_us: run.start_us,
                finish_us: t,
                actual_exec_us: run.actual_us,
                profiled_wcet_us: run.job.wcet_us,
                planned_wcet_us: run.job.planned_wcet_us,
                downgraded: false,
                frames,
            });
        }

        while let Some(&Reverse((at, id))) = releases.peek() {
            if at != t {
                break;
            }
            releases.pop();
            let request = by_id[&id];
            let seq = cursors.entry(id).or_insert(0);
            let frame = request.frame(*seq);
            *seq += 1;
            if *seq < request.num_frames {
                releases.push(Reverse((request.frame(*seq).release_us, id)));
            }
            let state = cats.get_mut(&request.category).expect("category registered");
            state.pending.push_back(frame);
            state.future -= 1;
        }

        for (category, state) in cats.iter_mut() {
            let mut emit = |frames: Vec<Frame>, state: &mut CategoryState| -> Result<()> {
                let job = make_job(next_job_id, category, frames, t, profile)?;
                next_job_id += 1;
                state.ready.push_back((job, t));
                Ok(())
            };
            match rule {
                Rule::Batch => {
                    while let Some(frames) = batch_policy_dispatch(&mut state.pending, state.size as usize) {
                        emit(frames, state)?;
                    }
                    if state.future == 0 && !state.pending.is_empty() {
                        let rest: Vec<Frame> = state.pending.drain(..).collect();
                        emit(rest, state)?;
                    }
                }
                Rule::BatchDelay { max_delay_us } => {
                    while let Some(frames) =
                        batch_delay_dispatch(&mut state.pending, state.size as usize, max_delay_us, t)
                    {
                        emit(frames, state)?;
                    }
                }
                Rule::Aimd { .. } => {
                    if state.running.is_none() && state.ready.is_empty() && !state.pending.is_empty() {
                        let n = (state.aimd_batch as usize).min(state.pending.len());
                        let frames: Vec<Frame> = state.pending.drain(..n).collect();
                        emit(frames, state)?;
                    }
                }
            }
            if state.running.is_none() {
                if let Some((job, emitted_us)) = state.ready.pop_front() {
                    let actual_us = exec.exec_time(&job, dispatched);
                    state.running = Some(Running {
                        index: dispatched,
                        emitted_us,
                        start_us: t,
                        actual_us,
                        remaining: u128::from(actual_us) * WORK_SCALE,
                        job,
                    });
                    dispatched += 1;
                }
            }
        }
    }

    debug_assert!(cats.values().all(|c| c.running.is_none()));
    jobs.sort_by_key(|j| j.index);
    let pending_at_end = cats.values().map(|c| c.pending.len() + c.ready.len()).sum();
    let admitted: Vec<Request> = order.into_iter().cloned().collect();
    let mut metrics = compute_metrics(records);
    metrics.admitted = admitted.len();
    Ok(SimOutcome {
        metrics,
        jobs,
        admissions: Vec::new(),
        admitted,
        adaptation_settled: true,
        pending_at_end,
    })
}

fn make_job(
    id: u64,
    category: &Category,
    frames: Vec<Frame>,
    now: Time,
    profile: &ExecutionProfile,
) -> Result<JobInstance> {
    let wcet = profile.lookup_wcet(category, frames.len() as u32)?;
    let deadline = frames.iter().map(|f| f.absolute_deadline_us).min().unwrap_or(now);
    Ok(JobInstance {
        id,
        key: QueueKey::new(category.clone(), true),
        release_us: now,
        relative_deadline_us: deadline.saturating_sub(now),
        wcet_us: wcet,
        planned_wcet_us: wcet,
        exec_shape: category.shape,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::ProfiledExec;
    use crate::model::Shape;

    fn frame(seq: u32, release: u64) -> Frame {
        Frame {
            request_id: 1,
            seq,
            release_us: release,
            absolute_deadline_us: release + 100_000,
        }
    }

    fn arrivals() -> VecDeque<Frame> {
        [0, 10_000, 20_000, 30_000].iter().enumerate().map(|(i, &r)| frame(i as u32, r)).collect()
    }

    #[test]
    fn aimd_rule() {
        assert_eq!(aimd_step(4, 10, 20, 1, 0.5), 5);
        assert_eq!(aimd_step(8, 30, 20, 1, 0.5), 4);
        assert_eq!(aimd_step(1, 30, 20, 1, 0.5), 1);
    }

    #[test]
    fn batch_fills_at_fourth_frame() {
        let all = arrivals();
        let mut pending = VecDeque::new();
        let mut emitted_at = None;
        for f in all {
            pending.push_back(f);
            if let Some(b) = batch_policy_dispatch(&mut pending, 4) {
                emitted_at = Some((f.release_us, b.len()));
            }
        }
        assert_eq!(emitted_at, Some((30_000, 4)));
    }

    #[test]
    fn batch_delay_times_out() {
        let mut pending: VecDeque<Frame> = arrivals().into_iter().take(2).collect();
        assert!(batch_delay_dispatch(&mut pending, 4, 15_000, 14_999).is_none());
        let b = batch_delay_dispatch(&mut pending, 4, 15_000, 15_000).unwrap();
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn size_one_is_immediate() {
        let mut pending: VecDeque<Frame> = arrivals().into_iter().take(1).collect();
        assert_eq!(batch_policy_dispatch(&mut pending, 1).unwrap().len(), 1);
    }

    fn profile() -> ExecutionProfile {
        let mut p = ExecutionProfile::new();
        let s = Shape::new(3, 8, 8).unwrap();
        p.insert(Category::new("a", s), vec![10_000, 15_000]).unwrap();
        p.insert(Category::new("b", s), vec![10_000, 15_000]).unwrap();
        p
    }

    fn req(id: u64, model: &str, n: u32) -> Request {
        Request {
            id,
            category: Category::new(model, Shape::new(3, 8, 8).unwrap()),
            period_us: 1_000_000,
            relative_deadline_us: 1_000_000,
            num_frames: n,
            first_release_us: 0,
            real_time: true,
        }
    }

    #[test]
    fn two_categories_share_the_processor() {
        let policy = PolicyConfig::Batch {
            size: BatchSize::Fixed(1),
        };
        let out = run_gps(&[req(1, "a", 1), req(2, "b", 1)], &policy, &profile(), &mut ProfiledExec).unwrap();
        let finishes: Vec<_> = out.jobs.iter().map(|j| j.finish_us).collect();
        assert_eq!(finishes, vec![20_000, 20_000]);
    }

    #[test]
    fn unequal_jobs_under_sharing() {
        // a: 10 000 of work, b: 15 000; both at rate 1/2 until a ends at
        // 20 000, then b alone for the remaining 5 000
        let policy = PolicyConfig::Batch {
            size: BatchSize::Fixed(2),
        };
        let trace = [req(1, "a", 1), req(2, "b", 1), req(3, "b", 1)];
        let out = run_gps(&trace, &policy, &profile(), &mut ProfiledExec).unwrap();
        let finishes: Vec<_> = out.jobs.iter().map(|j| (j.batch_size, j.finish_us)).collect();
        assert_eq!(finishes, vec![(1, 20_000), (2, 25_000)]);
    }

    #[test]
    fn batch_flushes_stragglers() {
        let policy = PolicyConfig::Batch {
            size: BatchSize::Fixed(2),
        };
        let out = run_gps(&[req(1, "a", 3)], &policy, &profile(), &mut ProfiledExec).unwrap();
        assert_eq!(out.metrics.frames, 3);
        assert_eq!(out.pending_at_end, 0);
    }

    #[test]
    fn auto_size_is_smallest_sustainable() {
        let mut p = ExecutionProfile::new();
        let s = Shape::new(3, 8, 8).unwrap();
        p.insert(Category::new("a", s), vec![12_000, 14_000, 16_000]).unwrap();
        let mut r = req(1, "a", 10);
        r.period_us = 10_000;
        // b = 1: 1.2, b = 2: 0.7
        assert_eq!(auto_batch_size(&[r], &p).unwrap(), 2);
    }
}
