//! Deadline-ordered execution queue and the non-preemptive worker.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::{Duration, JobId, JobInstance, LatencyRecord, QueueKey, Time};

/// EDF priority: absolute deadline, then release, then queue, then job id.
/// Smaller is more urgent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct JobKey {
    pub deadline_us: Time,
    pub release_us: Time,
    pub queue: QueueKey,
    pub id: JobId,
}

impl JobKey {
    pub fn of(job: &JobInstance) -> Self {
        Self {
            deadline_us: job.absolute_deadline_us(),
            release_us: job.release_us,
            queue: job.key.clone(),
            id: job.id,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    key: JobKey,
    job: JobInstance,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.cmp(&other.key)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecutionQueue {
    heap: BinaryHeap<Reverse<Entry>>,
}

impl ExecutionQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_job(&mut self, job: JobInstance) {
        let key = JobKey::of(&job);
        self.heap.push(Reverse(Entry { key, job }));
    }

    pub fn pop_earliest(&mut self) -> Result<JobInstance> {
        self.heap
            .pop()
            .map(|Reverse(e)| e.job)
            .ok_or(Error::EmptyQueue)
    }

    pub fn peek(&self) -> Option<&JobInstance> {
        self.heap.peek().map(|Reverse(e)| &e.job)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Queued jobs in priority order.
    pub fn sorted_jobs(&self) -> Vec<&JobInstance> {
        let mut entries: Vec<&Entry> = self.heap.iter().map(|Reverse(e)| e).collect();
        entries.sort();
        entries.into_iter().map(|e| &e.job).collect()
    }
}

/// Decides how long a dispatched job actually runs. `index` counts jobs
/// dispatched before this one.
pub trait ExecModel {
    fn exec_time(&mut self, job: &JobInstance, index: u64) -> Duration;
}

impl<M: ExecModel + ?Sized> ExecModel for Box<M> {
    fn exec_time(&mut self, job: &JobInstance, index: u64) -> Duration {
        (**self).exec_time(job, index)
    }
}

/// Every job runs exactly its profiled WCET.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProfiledExec;

impl ExecModel for ProfiledExec {
    fn exec_time(&mut self, job: &JobInstance, _index: u64) -> Duration {
        job.wcet_us
    }
}

/// Outcome of one job execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRecord {
    pub job_id: JobId,
    pub key: QueueKey,
    /// Dispatch order, starting at 0.
    pub index: u64,
    pub release_us: Time,
    pub absolute_deadline_us: Time,
    pub batch_size: u32,
    pub start_us: Time,
    pub finish_us: Time,
    pub actual_exec_us: Duration,
    pub profiled_wcet_us: Duration,
    pub planned_wcet_us: Duration,
    pub downgraded: bool,
    pub frames: Vec<LatencyRecord>,
}

/// Execution time beyond the profiled WCET, or 0.
pub fn detect_overrun(record: &CompletionRecord) -> Duration {
    record.actual_exec_us.saturating_sub(record.profiled_wcet_us)
}

/// Execution time saved relative to the original-shape plan, or 0.
pub fn execution_saving(record: &CompletionRecord) -> Duration {
    record.planned_wcet_us.saturating_sub(record.actual_exec_us)
}

/// The job currently occupying the worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InFlight {
    pub job_id: JobId,
    pub key: QueueKey,
    pub release_us: Time,
    pub absolute_deadline_us: Time,
    pub start_us: Time,
    pub finish_us: Time,
    pub wcet_us: Duration,
    pub real_time: bool,
}

/// Runs one job at a time, never preempting.
#[derive(Debug, Clone, Default)]
pub struct Worker {
    in_flight: Option<InFlight>,
    dispatched: u64,
}

impl Worker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_none()
    }

    pub fn in_flight(&self) -> Option<&InFlight> {
        self.in_flight.as_ref()
    }

    pub fn busy_until(&self) -> Option<Time> {
        self.in_flight.as_ref().map(|j| j.finish_us)
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Starts `job` at `now`. The worker stays busy until [`Worker::retire`]
    /// is called at or after the returned finish time.
    pub fn execute(
        &mut self,
        job: &JobInstance,
        now: Time,
        model: &mut dyn ExecModel,
    ) -> Result<CompletionRecord> {
        if let Some(busy) = &self.in_flight {
            return Err(Error::WorkerBusy(busy.finish_us));
        }
        if now < job.release_us {
            return Err(Error::EarlyStart {
                job: job.id,
                now,
                release: job.release_us,
            });
        }
        let index = self.dispatched;
        let actual = model.exec_time(job, index);
        let finish = now + actual;
        let real_time = job.key.real_time;
        let frames = job
            .frames
            .iter()
            .map(|f| LatencyRecord::new(f, real_time, job.release_us, now, finish))
            .collect();
        self.in_flight = Some(InFlight {
            job_id: job.id,
            key: job.key.clone(),
            release_us: job.release_us,
            absolute_deadline_us: job.absolute_deadline_us(),
            start_us: now,
            finish_us: finish,
            wcet_us: job.wcet_us,
            real_time,
        });
        self.dispatched += 1;
        Ok(CompletionRecord {
            job_id: job.id,
            key: job.key.clone(),
            index,
            release_us: job.release_us,
            absolute_deadline_us: job.absolute_deadline_us(),
            batch_size: job.batch_size(),
            start_us: now,
            finish_us: finish,
            actual_exec_us: actual,
            profiled_wcet_us: job.wcet_us,
            planned_wcet_us: job.planned_wcet_us,
            downgraded: job.is_downgraded(),
            frames,
        })
    }

    /// Frees the worker if its job has finished by `now`.
    pub fn retire(&mut self, now: Time) -> Option<InFlight> {
        match &self.in_flight {
            Some(j) if j.finish_us <= now => self.in_flight.take(),
            _ => None,
        }
    }
}
