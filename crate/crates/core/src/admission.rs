//! Two-phase admission control.
//!
//! Phase 1 is a utilization filter over the per-queue job streams the
//! batcher would produce, using the average number of frames per window.
//! Phase 2 is exact: it captures the live state, replays the batcher over
//! every future frame (the pending request included), and runs the
//! resulting jobs through an EDF imitator that mirrors the worker.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::disbatcher::{window_length, CategoryWindowState, DisBatcher, NonRtConfig};
use crate::edf::{InFlight, JobKey};
use crate::error::{Error, Result};
use crate::model::{Duration, Frame, JobId, JobInstance, QueueKey, Request, RequestId, Time};
use crate::profile::ExecutionProfile;
use crate::system::{BatchingMode, LiveSystem, RequestProgress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    One,
    Two,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::One => write!(f, "1"),
            Phase::Two => write!(f, "2"),
        }
    }
}

/// Estimated utilization of one queue's job stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueUtilization {
    pub key: QueueKey,
    pub window_us: Duration,
    /// Average frames per window, floored.
    pub frames_per_window: u64,
    /// Profiled cost of a window holding that many frames.
    pub wcet_us: Duration,
    pub utilization: BigRational,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtilizationReport {
    pub queues: Vec<QueueUtilization>,
    pub total: BigRational,
    pub pass: bool,
}

impl UtilizationReport {
    pub fn total_f64(&self) -> f64 {
        self.total.to_f64().unwrap_or(f64::INFINITY)
    }
}

/// Phase 1: sums `E(n_g) / W_g` over every queue of the request set that
/// would exist after admitting `pending`, where `n_g` is the floored sum of
/// `W_g / p` over the queue's requests. Rejects when the sum exceeds 1.
pub fn phase1(
    profile: &ExecutionProfile,
    existing: &[Request],
    pending: &Request,
    nonrt: &NonRtConfig,
) -> Result<UtilizationReport> {
    pending.validate()?;
    profile.max_batch(&pending.category)?;

    let mut groups: BTreeMap<QueueKey, Vec<&Request>> = BTreeMap::new();
    for r in existing.iter().chain(std::iter::once(pending)) {
        groups.entry(r.key()).or_default().push(r);
    }

    let mut queues = Vec::with_capacity(groups.len());
    let mut total = BigRational::zero();
    for (key, members) in groups {
        let window = if key.real_time {
            let deadlines: Vec<_> = members.iter().map(|r| r.relative_deadline_us).collect();
            window_length(&deadlines)?
        } else {
            nonrt.window_us
        };
        let per_window = members
            .iter()
            .map(|r| {
                let period = if key.real_time {
                    r.period_us
                } else {
                    r.period_us.max(nonrt.min_period_us)
                };
                BigRational::new(BigInt::from(window), BigInt::from(period))
            })
            .fold(BigRational::zero(), |acc, x| acc + x);
        let frames = per_window.floor().to_integer().to_u64().unwrap_or(u64::MAX);
        let wcet = if frames == 0 {
            0
        } else {
            profile.split_cost(&key.category, frames)?
        };
        let utilization = BigRational::new(BigInt::from(wcet), BigInt::from(window));
        total += utilization.clone();
        queues.push(QueueUtilization {
            key,
            window_us: window,
            frames_per_window: frames,
            wcet_us: wcet,
            utilization,
        });
    }
    let pass = total <= BigRational::one();
    Ok(UtilizationReport {
        queues,
        total,
        pass,
    })
}

/// Everything Phase 2 needs to know about the live system at one instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemSnapshot {
    pub now: Time,
    pub mode: BatchingMode,
    pub nonrt: NonRtConfig,
    /// Window lengths, next joints, and frames waiting to be batched.
    pub windows: Vec<CategoryWindowState>,
    /// Batched jobs waiting in the deadline queue, in priority order.
    pub queued: Vec<JobInstance>,
    pub in_flight: Option<InFlight>,
    /// Period, deadline, and release cursor of every admitted request.
    pub requests: Vec<RequestProgress>,
    pub next_job_id: JobId,
}

impl SystemSnapshot {
    pub fn pending_frame_count(&self) -> usize {
        self.windows.iter().map(|w| w.pending.len()).sum()
    }
}

/// Copies the live state. Must be called between event steps.
pub fn capture_state(system: &LiveSystem, now: Time) -> SystemSnapshot {
    SystemSnapshot {
        now,
        mode: system.mode,
        nonrt: *system.batcher.nonrt(),
        windows: system.batcher.states().cloned().collect(),
        queued: system.queue.sorted_jobs().into_iter().cloned().collect(),
        in_flight: system.worker.in_flight().cloned(),
        requests: system.requests().cloned().collect(),
        next_job_id: system.next_job_id(),
    }
}

/// A job as the imitator sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoJob {
    pub id: JobId,
    pub key: QueueKey,
    pub release_us: Time,
    pub deadline_us: Time,
    pub wcet_us: Duration,
    pub frames: Vec<Frame>,
}

impl PseudoJob {
    /// Only real-time deadlines make a schedule infeasible.
    pub fn enforced(&self) -> bool {
        self.key.real_time
    }

    fn job_key(&self) -> JobKey {
        JobKey {
            deadline_us: self.deadline_us,
            release_us: self.release_us,
            queue: self.key.clone(),
            id: self.id,
        }
    }
}

impl From<&JobInstance> for PseudoJob {
    fn from(job: &JobInstance) -> Self {
        Self {
            id: job.id,
            key: job.key.clone(),
            release_us: job.release_us,
            deadline_us: job.absolute_deadline_us(),
            wcet_us: job.planned_wcet_us,
            frames: job.frames.clone(),
        }
    }
}

impl From<JobInstance> for PseudoJob {
    fn from(job: JobInstance) -> Self {
        let wcet_us = job.planned_wcet_us;
        Self {
            id: job.id,
            deadline_us: job.absolute_deadline_us(),
            key: job.key,
            release_us: job.release_us,
            wcet_us,
            frames: job.frames,
        }
    }
}

/// Phase 2, step 2: the jobs the batcher will release from `snapshot.now`
/// on if `pending` is admitted, ordered by release time. Ids continue from
/// the snapshot's counter in the order the live system would assign them.
pub fn generate_pseudo_jobs(
    snapshot: &SystemSnapshot,
    pending: &Request,
    profile: &ExecutionProfile,
) -> Result<Vec<PseudoJob>> {
    pending.validate()?;
    let now = snapshot.now;
    if pending.first_release_us < now {
        return Err(Error::InvalidRequest {
            id: pending.id,
            reason: format!("first release {} precedes admission time {now}", pending.first_release_us),
        });
    }
    let mut streams: Vec<RequestProgress> = snapshot
        .requests
        .iter()
        .filter(|p| p.remaining() > 0)
        .cloned()
        .collect();

    match snapshot.mode {
        BatchingMode::Windows => {
            let mut batcher = DisBatcher::restore(
                snapshot.windows.iter().cloned(),
                snapshot.next_job_id,
                snapshot.nonrt,
            );
            let (effective, flushed) = batcher.register(pending, now, profile)?;
            streams.push(RequestProgress {
                request: effective,
                next_seq: 0,
            });
            let mut jobs: Vec<PseudoJob> = flushed.into_iter().map(PseudoJob::from).collect();
            replay_windows(&mut batcher, &streams, profile, &mut jobs)?;
            Ok(jobs)
        }
        BatchingMode::PerFrame => {
            profile.lookup_wcet(&pending.category, 1)?;
            streams.push(RequestProgress {
                request: pending.clone(),
                next_seq: 0,
            });
            let mut frames: Vec<(Frame, usize)> = streams
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (p.next_seq..p.request.num_frames).map(move |s| (p.request.frame(s), i)))
                .collect();
            frames.sort_by_key(|(f, _)| (f.release_us, f.request_id, f.seq));
            let mut id = snapshot.next_job_id;
            frames
                .into_iter()
                .map(|(frame, i)| {
                    let request = &streams[i].request;
                    let wcet = profile.lookup_wcet(&request.category, 1)?;
                    let job = PseudoJob {
                        id,
                        key: request.key(),
                        release_us: frame.release_us,
                        deadline_us: frame.absolute_deadline_us,
                        wcet_us: wcet,
                        frames: vec![frame],
                    };
                    id += 1;
                    Ok(job)
                })
                .collect()
        }
    }
}

/// Feeds every future frame of `streams` through `batcher` in release order,
/// closing windows at their joints before frames released at the same
/// instant, exactly as the live event loop does.
fn replay_windows(
    batcher: &mut DisBatcher,
    streams: &[RequestProgress],
    profile: &ExecutionProfile,
    out: &mut Vec<PseudoJob>,
) -> Result<()> {
    let mut cursors: Vec<u32> = streams.iter().map(|p| p.next_seq).collect();
    let mut heap: BinaryHeap<Reverse<(Time, RequestId, usize)>> = streams
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.next_release_us().map(|t| Reverse((t, p.request.id, i))))
        .collect();
    loop {
        let next_frame = heap.peek().map(|Reverse((t, _, _))| *t);
        let next_joint = batcher.next_due_joint();
        let close_first = match (next_joint, next_frame) {
            (None, None) => return Ok(()),
            (Some(j), Some(f)) => j <= f,
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        if close_first {
            let joint = next_joint.expect("joint present");
            let jobs = batcher.close_due(joint, profile, |_| None)?;
            out.extend(jobs.into_iter().map(PseudoJob::from));
        } else {
            let t = next_frame.expect("frame present");
            while let Some(&Reverse((due, _, i))) = heap.peek() {
                if due != t {
                    break;
                }
                heap.pop();
                let request = &streams[i].request;
                let frame = request.frame(cursors[i]);
                batcher.enqueue_frame(frame, t)?;
                cursors[i] += 1;
                if cursors[i] < request.num_frames {
                    let next = request.frame(cursors[i]).release_us;
                    heap.push(Reverse((next, request.id, i)));
                }
            }
        }
    }
}

/// First job the imitator saw finish past its deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Miss {
    pub job_id: JobId,
    pub finish_us: Time,
    pub deadline_us: Time,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImitatorOutcome {
    pub schedulable: bool,
    /// Simulated finish time of every job executed, in execution order.
    /// Stops at the first miss.
    pub finishes: Vec<(JobId, Time)>,
    pub miss: Option<Miss>,
}

/// Clock-driven EDF simulation over jobs with known release times.
///
/// Jobs are fed in release order, possibly in several slices; the result
/// does not depend on how the input is sliced. A job released at the very
/// instant the clock reaches is visible to that dispatch decision, matching
/// the worker, which sees every job batched at an instant before it picks.
#[derive(Debug, Clone)]
pub struct EdfImitator {
    t: Time,
    queue: BinaryHeap<Reverse<(JobKey, Duration, bool)>>,
    future: VecDeque<(JobKey, Duration, bool)>,
    last_release: Option<Time>,
    fed: usize,
    finishes: Vec<(JobId, Time)>,
    miss: Option<Miss>,
}

impl EdfImitator {
    pub fn new(start: Time) -> Self {
        Self {
            t: start,
            queue: BinaryHeap::new(),
            future: VecDeque::new(),
            last_release: None,
            fed: 0,
            finishes: Vec::new(),
            miss: None,
        }
    }

    pub fn now(&self) -> Time {
        self.t
    }

    /// Accounts for the job occupying the worker: nothing else starts
    /// before it finishes.
    pub fn block_on(&mut self, job: &InFlight) {
        let finish = (job.start_us + job.wcet_us).max(self.t);
        self.t = finish;
        self.finishes.push((job.job_id, finish));
        if job.real_time && finish > job.absolute_deadline_us && self.miss.is_none() {
            self.miss = Some(Miss {
                job_id: job.job_id,
                finish_us: finish,
                deadline_us: job.absolute_deadline_us,
            });
        }
    }

    /// Places an already released job straight into the deadline queue.
    pub fn seed(&mut self, job: &PseudoJob) {
        self.queue
            .push(Reverse((job.job_key(), job.wcet_us, job.enforced())));
    }

    /// Appends future jobs, which must continue the release order, and
    /// simulates as far as the known input allows.
    pub fn extend<'a>(&mut self, jobs: impl IntoIterator<Item = &'a PseudoJob>) -> Result<()> {
        for job in jobs {
            if self.last_release.is_some_and(|r| job.release_us < r) {
                return Err(Error::UnsortedInput(self.fed));
            }
            self.last_release = Some(job.release_us);
            self.future
                .push_back((job.job_key(), job.wcet_us, job.enforced()));
            self.fed += 1;
        }
        self.advance(self.last_release);
        Ok(())
    }

    /// Simulates to the end, assuming no further jobs.
    pub fn finish(mut self) -> ImitatorOutcome {
        self.advance(None);
        ImitatorOutcome {
            schedulable: self.miss.is_none(),
            finishes: self.finishes,
            miss: self.miss,
        }
    }

    /// Runs every step whose decision cannot depend on unseen jobs, which
    /// are known to be released no earlier than `horizon`.
    fn advance(&mut self, horizon: Option<Time>) {
        while self.miss.is_none() {
            while self
                .future
                .front()
                .is_some_and(|(k, _, _)| k.release_us <= self.t)
            {
                let job = self.future.pop_front().expect("front exists");
                self.queue.push(Reverse(job));
            }
            if self.queue.is_empty() {
                let Some((next, _, _)) = self.future.front() else {
                    return;
                };
                if horizon.is_some_and(|h| next.release_us >= h) {
                    return;
                }
                self.t = self.t.max(next.release_us);
                continue;
            }
            if horizon.is_some_and(|h| self.t >= h) {
                return;
            }
            let Reverse((key, wcet, enforced)) = self.queue.pop().expect("non-empty queue");
            self.t += wcet;
            self.finishes.push((key.id, self.t));
            if enforced && self.t > key.deadline_us {
                self.miss = Some(Miss {
                    job_id: key.id,
                    finish_us: self.t,
                    deadline_us: key.deadline_us,
                });
            }
        }
    }
}

/// One-shot imitator run: `seed` jobs start in the queue at `start`,
/// `future` jobs are released over time.
pub fn edf_imitator(start: Time, seed: &[PseudoJob], future: &[PseudoJob]) -> Result<ImitatorOutcome> {
    let mut imitator = EdfImitator::new(start);
    for job in seed {
        imitator.seed(job);
    }
    imitator.extend(future)?;
    Ok(imitator.finish())
}

/// Phase 2, step 3: imitator run over the captured state plus `future`.
pub fn imitate_snapshot(snapshot: &SystemSnapshot, future: &[PseudoJob]) -> Result<ImitatorOutcome> {
    let mut imitator = EdfImitator::new(snapshot.now);
    if let Some(job) = &snapshot.in_flight {
        imitator.block_on(job);
    }
    for job in &snapshot.queued {
        imitator.seed(&PseudoJob::from(job));
    }
    imitator.extend(future)?;
    Ok(imitator.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmissionConfig {
    /// Run the utilization filter before the exact test.
    pub phase1: bool,
    /// On a utilization rejection, also run the exact test and record its verdict.
    pub audit_phase1: bool,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self {
            phase1: true,
            audit_phase1: false,
        }
    }
}

/// Predicted schedule retained from an accepted Phase 2 run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub at_us: Time,
    pub job_finishes: Vec<(JobId, Time)>,
    /// Predicted latency of every frame of the admitted request, by sequence number.
    pub pending_latencies: Vec<(u32, Duration)>,
}

impl Prediction {
    pub fn max_latency_us(&self) -> Option<Duration> {
        self.pending_latencies.iter().map(|&(_, l)| l).max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Admitted,
    Rejected(Phase),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionDecision {
    pub request_id: RequestId,
    pub at_us: Time,
    pub verdict: Verdict,
    pub reason: Option<String>,
    pub report: Option<UtilizationReport>,
    pub prediction: Option<Prediction>,
    /// Exact-test verdict for a utilization rejection, when audited.
    pub phase2_would_admit: Option<bool>,
}

impl AdmissionDecision {
    pub fn admitted(&self) -> bool {
        self.verdict == Verdict::Admitted
    }

    fn rejected(request: &Request, now: Time, phase: Phase, reason: String) -> Self {
        Self {
            request_id: request.id,
            at_us: now,
            verdict: Verdict::Rejected(phase),
            reason: Some(reason),
            report: None,
            prediction: None,
            phase2_would_admit: None,
        }
    }
}

/// Phase 2 alone against a captured state.
pub fn phase2(
    snapshot: &SystemSnapshot,
    pending: &Request,
    profile: &ExecutionProfile,
) -> Result<(ImitatorOutcome, Vec<PseudoJob>)> {
    let future = generate_pseudo_jobs(snapshot, pending, profile)?;
    let outcome = imitate_snapshot(snapshot, &future)?;
    Ok((outcome, future))
}

/// Decides whether `pending`, arriving at `now`, can join the live system.
/// A rejected request leaves the system untouched; an admitted one must be
/// registered by the caller.
pub fn admit(
    system: &LiveSystem,
    now: Time,
    profile: &ExecutionProfile,
    pending: &Request,
    config: &AdmissionConfig,
) -> Result<AdmissionDecision> {
    if let Err(e) = pending
        .validate()
        .and_then(|_| profile.max_batch(&pending.category).map(|_| ()))
    {
        return Ok(AdmissionDecision::rejected(pending, now, Phase::One, e.to_string()));
    }

    let mut report = None;
    if config.phase1 && system.mode == BatchingMode::Windows {
        let existing: Vec<Request> = system.active_requests().cloned().collect();
        match phase1(profile, &existing, pending, system.batcher.nonrt()) {
            Ok(r) if r.pass => report = Some(r),
            Ok(r) => {
                let reason = format!("estimated utilization {:.4} exceeds 1", r.total_f64());
                let mut d = AdmissionDecision::rejected(pending, now, Phase::One, reason);
                d.report = Some(r);
                if config.audit_phase1 {
                    let (outcome, _) = phase2(&capture_state(system, now), pending, profile)?;
                    d.phase2_would_admit = Some(outcome.schedulable);
                }
                return Ok(d);
            }
            Err(e @ (Error::DegenerateDeadline(_) | Error::UnknownCategory(_))) => {
                return Ok(AdmissionDecision::rejected(pending, now, Phase::One, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }

    let snapshot = capture_state(system, now);
    let (outcome, future) = match phase2(&snapshot, pending, profile) {
        Ok(x) => x,
        Err(e @ Error::DegenerateDeadline(_)) => {
            return Ok(AdmissionDecision::rejected(pending, now, Phase::Two, e.to_string()));
        }
        Err(e) => return Err(e),
    };
    if let Some(miss) = outcome.miss {
        let reason = format!(
            "job {} would finish at {} us, after its deadline {} us",
            miss.job_id, miss.finish_us, miss.deadline_us
        );
        let mut d = AdmissionDecision::rejected(pending, now, Phase::Two, reason);
        d.report = report;
        return Ok(d);
    }

    let finish_of: HashMap<JobId, Time> = outcome.finishes.iter().copied().collect();
    let mut pending_latencies: Vec<(u32, Duration)> = future
        .iter()
        .flat_map(|job| {
            let finish = finish_of[&job.id];
            job.frames
                .iter()
                .filter(|f| f.request_id == pending.id)
                .map(move |f| (f.seq, finish - f.release_us))
        })
        .collect();
    pending_latencies.sort_unstable();

    Ok(AdmissionDecision {
        request_id: pending.id,
        at_us: now,
        verdict: Verdict::Admitted,
        reason: None,
        report,
        prediction: Some(Prediction {
            at_us: now,
            job_finishes: outcome.finishes,
            pending_latencies,
        }),
        phase2_would_admit: None,
    })
}
