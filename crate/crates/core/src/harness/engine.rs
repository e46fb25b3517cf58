//! Discrete-event simulation of one policy over one trace.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::admission::{admit, AdmissionConfig, AdmissionDecision, Phase, Verdict};
use crate::disbatcher::NonRtConfig;
use crate::edf::{detect_overrun, execution_saving, CompletionRecord, ExecModel};
use crate::error::{Error, Result};
use crate::harness::baselines::run_gps;
use crate::harness::metrics::{compute_metrics, Metrics};
use crate::model::{Duration, JobId, JobInstance, LatencyRecord, Request, RequestId, Time};
use crate::profile::ExecutionProfile;
use crate::system::{BatchingMode, LiveSystem};

/// Fixed batch size of the BATCH baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// Smallest size at which the trace's offered load fits the processor.
    Auto,
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyConfig {
    DeepRt,
    Aimd {
        /// Latency objective; `None` uses the tightest frame deadline in the batch.
        slo_us: Option<Duration>,
        additive_step: u32,
        multiplicative_factor: f64,
    },
    Batch {
        size: BatchSize,
    },
    BatchDelay {
        size: BatchSize,
        max_delay_us: Duration,
    },
    Sedf,
}

impl PolicyConfig {
    pub const NAMES: [&'static str; 5] = ["deeprt", "aimd", "batch", "batch-delay", "sedf"];

    pub fn aimd() -> Self {
        PolicyConfig::Aimd {
            slo_us: None,
            additive_step: 1,
            multiplicative_factor: 0.5,
        }
    }

    pub fn batch() -> Self {
        PolicyConfig::Batch {
            size: BatchSize::Auto,
        }
    }

    pub fn batch_delay() -> Self {
        PolicyConfig::BatchDelay {
            size: BatchSize::Auto,
            max_delay_us: 10_000,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::DeepRt => "deeprt",
            PolicyConfig::Aimd { .. } => "aimd",
            PolicyConfig::Batch { .. } => "batch",
            PolicyConfig::BatchDelay { .. } => "batch-delay",
            PolicyConfig::Sedf => "sedf",
        }
    }

    /// Baselines without admission control.
    pub fn is_baseline(&self) -> bool {
        matches!(
            self,
            PolicyConfig::Aimd { .. } | PolicyConfig::Batch { .. } | PolicyConfig::BatchDelay { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        match *self {
            PolicyConfig::Aimd {
                slo_us,
                additive_step,
                multiplicative_factor,
            } => {
                if slo_us == Some(0) || additive_step == 0 {
                    return bad("AIMD objective and step must be positive");
                }
                if !(multiplicative_factor > 0.0 && multiplicative_factor < 1.0) {
                    return bad("AIMD factor must lie in (0, 1)");
                }
            }
            PolicyConfig::Batch { size } | PolicyConfig::BatchDelay { size, .. } => {
                if size == BatchSize::Fixed(0) {
                    return bad("batch size must be positive");
                }
                if let PolicyConfig::BatchDelay { max_delay_us: 0, .. } = self {
                    return bad("batch delay must be positive");
                }
            }
            PolicyConfig::DeepRt | PolicyConfig::Sedf => {}
        }
        Ok(())
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deeprt" => Ok(PolicyConfig::DeepRt),
            "aimd" => Ok(PolicyConfig::aimd()),
            "batch" => Ok(PolicyConfig::batch()),
            "batch-delay" | "batchdelay" => Ok(PolicyConfig::batch_delay()),
            "sedf" => Ok(PolicyConfig::Sedf),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimOptions {
    /// Batch a waiting window ahead of its joint when the worker would idle.
    pub early_dispatch: bool,
    pub adaptation: bool,
    /// Run admission control on arriving requests.
    pub admission: bool,
    pub phase1: bool,
    pub nonrt: NonRtConfig,
    /// Stop offering requests after this many consecutive rejections.
    pub stop_after_rejections: Option<usize>,
    /// Run exactly these requests, without admission control.
    pub replay_admitted: Option<BTreeSet<RequestId>>,
    /// Keep every admission's predicted job finish times.
    pub keep_predictions: bool,
    /// Run the exact test on every utilization rejection, for the record.
    pub audit_phase1: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            early_dispatch: true,
            adaptation: true,
            admission: true,
            phase1: true,
            nonrt: NonRtConfig::default(),
            stop_after_rejections: None,
            replay_admitted: None,
            keep_predictions: false,
            audit_phase1: false,
        }
    }
}

impl SimOptions {
    /// Exact profiled execution, no early dispatch, no adaptation: the
    /// setting in which admitted work provably meets its deadlines.
    pub fn guaranteed() -> Self {
        Self {
            early_dispatch: false,
            adaptation: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub metrics: Metrics,
    /// Executed jobs in dispatch order.
    pub jobs: Vec<CompletionRecord>,
    pub admissions: Vec<AdmissionDecision>,
    /// Requests that ran, in arrival order.
    pub admitted: Vec<Request>,
    pub adaptation_settled: bool,
    /// Frames released but never executed; 0 at quiescence.
    pub pending_at_end: usize,
}

pub fn arrival_order(trace: &[Request]) -> Result<Vec<&Request>> {
    let mut seen = BTreeSet::new();
    for r in trace {
        if !seen.insert(r.id) {
            return Err(Error::DuplicateRequest(r.id));
        }
    }
    let mut order: Vec<&Request> = trace.iter().collect();
    order.sort_by_key(|r| (r.first_release_us, r.id));
    Ok(order)
}

/// Runs `policy` over `trace` to quiescence.
pub fn run_simulation(
    trace: &[Request],
    policy: &PolicyConfig,
    profile: &ExecutionProfile,
    exec: &mut dyn ExecModel,
    options: &SimOptions,
) -> Result<SimOutcome> {
    policy.validate()?;
    let selected: Vec<Request> = match &options.replay_admitted {
        Some(ids) => trace.iter().filter(|r| ids.contains(&r.id)).cloned().collect(),
        None => trace.to_vec(),
    };
    let mut outcome = if policy.is_baseline() {
        run_gps(&selected, policy, profile, exec)?
    } else {
        run_live(&selected, policy, profile, exec, options)?
    };
    outcome.metrics.policy = policy.name().to_string();
    Ok(outcome)
}

fn run_live(
    trace: &[Request],
    policy: &PolicyConfig,
    profile: &ExecutionProfile,
    exec: &mut dyn ExecModel,
    options: &SimOptions,
) -> Result<SimOutcome> {
    let deeprt = *policy == PolicyConfig::DeepRt;
    let mode = if deeprt {
        BatchingMode::Windows
    } else {
        BatchingMode::PerFrame
    };
    let adapt = deeprt && options.adaptation;
    let early = deeprt && options.early_dispatch;
    let use_admission = options.admission && options.replay_admitted.is_none();
    let config = AdmissionConfig {
        phase1: deeprt && options.phase1,
        audit_phase1: options.audit_phase1,
    };

    let arrivals = arrival_order(trace)?;
    let mut sys = LiveSystem::new(mode, options.nonrt, adapt);
    let mut next_arrival = 0usize;
    let mut offering = true;
    let mut streak = 0usize;
    let mut jobs: Vec<CompletionRecord> = Vec::new();
    let mut records: Vec<LatencyRecord> = Vec::new();
    let mut admissions: Vec<AdmissionDecision> = Vec::new();
    let mut admitted: Vec<Request> = Vec::new();

    loop {
        let arrival = arrivals
            .get(next_arrival)
            .filter(|_| offering)
            .map(|r| r.first_release_us);
        let Some(t) = [
            sys.worker.busy_until(),
            sys.next_joint_us(),
            sys.next_release_us(),
            arrival,
        ]
        .into_iter()
        .flatten()
        .min() else {
            break;
        };

        if sys.worker.retire(t).is_some() {
            let done = jobs.last().expect("retired job was recorded");
            records.extend_from_slice(&done.frames);
            if adapt {
                let over = detect_overrun(done);
                if over > 0 {
                    sys.adaptation.on_completion(&done.key, over as i64)?;
                } else if done.downgraded {
                    let saved = execution_saving(done);
                    if saved > 0 {
                        sys.adaptation.on_completion(&done.key, -(saved as i64))?;
                    }
                }
            }
        }

        sys.close_due(t, profile)?;

        while offering && next_arrival < arrivals.len() && arrivals[next_arrival].first_release_us == t {
            let request = arrivals[next_arrival];
            next_arrival += 1;
            if !use_admission {
                sys.register(request, t, profile)?;
                admitted.push(request.clone());
                continue;
            }
            let mut decision = admit(&sys, t, profile, request, &config)?;
            if decision.admitted() {
                sys.register(request, t, profile)?;
                admitted.push(request.clone());
                streak = 0;
            } else {
                streak += 1;
                if options.stop_after_rejections.is_some_and(|n| streak >= n) {
                    offering = false;
                }
            }
            if !options.keep_predictions {
                if let Some(p) = decision.prediction.as_mut() {
                    p.job_finishes = Vec::new();
                }
            }
            admissions.push(decision);
        }

        sys.release_frames(t, profile)?;

        if sys.worker.is_idle() {
            let next: Option<JobInstance> = if !sys.queue.is_empty() {
                Some(sys.queue.pop_earliest()?)
            } else if early {
                let mut formed = sys.try_early_dispatch(t, profile)?.into_iter();
                let first = formed.next();
                for job in formed {
                    sys.queue.push_job(job);
                }
                first
            } else {
                None
            };
            if let Some(job) = next {
                jobs.push(sys.worker.execute(&job, t, exec)?);
            }
        }
    }

    let pending_at_end = sys.batcher.pending_frames() + sys.queue.len();
    let mut metrics = compute_metrics(records);
    metrics.admitted = admitted.len();
    metrics.rejected_phase1 = count_rejected(&admissions, Phase::One);
    metrics.rejected_phase2 = count_rejected(&admissions, Phase::Two);
    Ok(SimOutcome {
        metrics,
        jobs,
        admissions,
        admitted,
        adaptation_settled: sys.adaptation.is_settled(),
        pending_at_end,
    })
}

fn count_rejected(decisions: &[AdmissionDecision], phase: Phase) -> usize {
    decisions
        .iter()
        .filter(|d| d.verdict == Verdict::Rejected(phase))
        .count()
}

/// A job whose simulated finish differs from the prediction of the last
/// admission made at or before its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mismatch {
    pub job_id: JobId,
    pub admission_at_us: Time,
    pub predicted_us: Option<Time>,
    pub actual_us: Time,
}

/// Compares every job against the governing prediction. Requires a run
/// with `keep_predictions`.
pub fn prediction_mismatches(outcome: &SimOutcome) -> Vec<Mismatch> {
    let predictions: Vec<(Time, HashMap<JobId, Time>)> = outcome
        .admissions
        .iter()
        .filter_map(|d| d.prediction.as_ref())
        .map(|p| (p.at_us, p.job_finishes.iter().copied().collect()))
        .collect();
    let mut out = Vec::new();
    for job in &outcome.jobs {
        let governing = predictions.partition_point(|(at, _)| *at <= job.start_us);
        let Some((at, finishes)) = governing.checked_sub(1).map(|i| &predictions[i]) else {
            continue;
        };
        let predicted = finishes.get(&job.job_id).copied();
        if predicted != Some(job.finish_us) {
            out.push(Mismatch {
                job_id: job.job_id,
                admission_at_us: *at,
                predicted_us: predicted,
                actual_us: job.finish_us,
            });
        }
    }
    out
}
