//! Live scheduler state: batcher, deadline queue, worker, and the frame
//! streams of admitted requests.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::adaptation::Adaptation;
use crate::disbatcher::{DisBatcher, NonRtConfig};
use crate::edf::{ExecutionQueue, Worker};
use crate::error::Result;
use crate::model::{JobId, JobInstance, QueueKey, Request, RequestId, Shape, Time};
use crate::profile::ExecutionProfile;

/// How frames become jobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchingMode {
    /// Per-queue time windows.
    Windows,
    /// Every frame is its own job, due at the frame's deadline.
    PerFrame,
}

/// Release cursor of one admitted request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestProgress {
    /// The request as released (non-real-time periods may be stretched).
    pub request: Request,
    /// Sequence number of the next frame to be released.
    pub next_seq: u32,
}

impl RequestProgress {
    pub fn remaining(&self) -> u32 {
        self.request.num_frames - self.next_seq
    }

    pub fn next_release_us(&self) -> Option<Time> {
        (self.next_seq < self.request.num_frames)
            .then(|| self.request.frame(self.next_seq).release_us)
    }
}

#[derive(Debug, Clone)]
pub struct LiveSystem {
    pub mode: BatchingMode,
    pub batcher: DisBatcher,
    pub queue: ExecutionQueue,
    pub worker: Worker,
    pub adaptation: Adaptation,
    pub adaptation_enabled: bool,
    requests: BTreeMap<RequestId, RequestProgress>,
    releases: BinaryHeap<Reverse<(Time, RequestId)>>,
    next_frame_job_id: JobId,
}

impl LiveSystem {
    pub fn new(mode: BatchingMode, nonrt: NonRtConfig, adaptation_enabled: bool) -> Self {
        Self {
            mode,
            batcher: DisBatcher::new(nonrt),
            queue: ExecutionQueue::new(),
            worker: Worker::new(),
            adaptation: Adaptation::new(),
            adaptation_enabled,
            requests: BTreeMap::new(),
            releases: BinaryHeap::new(),
            next_frame_job_id: 0,
        }
    }

    pub fn requests(&self) -> impl Iterator<Item = &RequestProgress> {
        self.requests.values()
    }

    /// Requests that still have frames to release.
    pub fn active_requests(&self) -> impl Iterator<Item = &Request> {
        self.requests
            .values()
            .filter(|p| p.remaining() > 0)
            .map(|p| &p.request)
    }

    /// Id the next job created by this system will carry.
    pub fn next_job_id(&self) -> JobId {
        match self.mode {
            BatchingMode::Windows => self.batcher.next_job_id(),
            BatchingMode::PerFrame => self.next_frame_job_id,
        }
    }

    pub fn next_release_us(&self) -> Option<Time> {
        self.releases.peek().map(|Reverse((t, _))| *t)
    }

    /// Next instant a window with waiting frames closes.
    pub fn next_joint_us(&self) -> Option<Time> {
        match self.mode {
            BatchingMode::Windows => self.batcher.next_due_joint(),
            BatchingMode::PerFrame => None,
        }
    }

    fn exec_shape(&self, key: &QueueKey) -> Option<Shape> {
        self.adaptation_enabled
            .then(|| self.adaptation.effective_shape(key))
            .filter(|s| *s != key.category.shape)
    }

    /// Registers an admitted request at `now`; its frames are released from
    /// then on by [`LiveSystem::release_frames`].
    pub fn register(
        &mut self,
        request: &Request,
        now: Time,
        profile: &ExecutionProfile,
    ) -> Result<Request> {
        let effective = match self.mode {
            BatchingMode::Windows => {
                let (effective, flushed) = self.batcher.register(request, now, profile)?;
                for job in flushed {
                    self.queue.push_job(job);
                }
                effective
            }
            BatchingMode::PerFrame => {
                request.validate()?;
                if self.requests.contains_key(&request.id) {
                    return Err(crate::error::Error::DuplicateRequest(request.id));
                }
                profile.lookup_wcet(&request.category, 1)?;
                request.clone()
            }
        };
        self.adaptation.track(&effective.key());
        let progress = RequestProgress {
            request: effective.clone(),
            next_seq: 0,
        };
        if let Some(t) = progress.next_release_us() {
            self.releases.push(Reverse((t, effective.id)));
        }
        self.requests.insert(effective.id, progress);
        Ok(effective)
    }

    /// Closes every window with waiting frames whose joint is `t`.
    pub fn close_due(&mut self, t: Time, profile: &ExecutionProfile) -> Result<()> {
        if self.mode != BatchingMode::Windows {
            return Ok(());
        }
        let adaptation = &self.adaptation;
        let enabled = self.adaptation_enabled;
        let jobs = self.batcher.close_due(t, profile, |key| {
            enabled
                .then(|| adaptation.effective_shape(key))
                .filter(|s| *s != key.category.shape)
        })?;
        for job in jobs {
            self.queue.push_job(job);
        }
        Ok(())
    }

    /// Releases every frame due at `t`, in request-id order.
    pub fn release_frames(&mut self, t: Time, profile: &ExecutionProfile) -> Result<usize> {
        let mut released = 0;
        while let Some(&Reverse((due, id))) = self.releases.peek() {
            if due != t {
                break;
            }
            self.releases.pop();
            let progress = self.requests.get_mut(&id).expect("release of known request");
            let frame = progress.request.frame(progress.next_seq);
            progress.next_seq += 1;
            if let Some(next) = progress.next_release_us() {
                self.releases.push(Reverse((next, id)));
            }
            let request = &progress.request;
            match self.mode {
                BatchingMode::Windows => self.batcher.enqueue_frame(frame, t)?,
                BatchingMode::PerFrame => {
                    let wcet = profile.lookup_wcet(&request.category, 1)?;
                    let job = JobInstance {
                        id: self.next_frame_job_id,
                        key: request.key(),
                        frames: vec![frame],
                        release_us: frame.release_us,
                        relative_deadline_us: request.relative_deadline_us,
                        wcet_us: wcet,
                        planned_wcet_us: wcet,
                        exec_shape: request.category.shape,
                    };
                    self.next_frame_job_id += 1;
                    self.queue.push_job(job);
                }
            }
            released += 1;
        }
        Ok(released)
    }

    /// Queues that can still form a job: frames waiting or still to come.
    fn live_keys(&self) -> BTreeSet<QueueKey> {
        let mut keys: BTreeSet<QueueKey> = self
            .batcher
            .states()
            .filter(|s| !s.pending.is_empty())
            .map(|s| s.key.clone())
            .collect();
        keys.extend(self.active_requests().map(Request::key));
        keys
    }

    /// When the worker is idle and nothing is queued, batches the most
    /// urgent waiting window ahead of its joint, provided the batch will
    /// finish before any window closes. Returns the jobs formed.
    pub fn try_early_dispatch(
        &mut self,
        now: Time,
        profile: &ExecutionProfile,
    ) -> Result<Vec<JobInstance>> {
        if self.mode != BatchingMode::Windows || !self.worker.is_idle() || !self.queue.is_empty() {
            return Ok(Vec::new());
        }
        let candidate = self
            .batcher
            .states()
            .filter(|s| !s.pending.is_empty())
            .min_by_key(|s| (s.next_joint_us + s.window_len_us, s.key.clone()))
            .map(|s| (s.key.clone(), s.pending.len()));
        let Some((key, waiting)) = candidate else {
            return Ok(Vec::new());
        };
        let live = self.live_keys();
        let horizon = self
            .batcher
            .states()
            .filter(|s| live.contains(&s.key))
            .map(|s| s.upcoming_joint(now))
            .min();
        let shape = self.exec_shape(&key);
        let max = profile.max_batch(&key.category)? as usize;
        let first = waiting.min(max) as u32;
        let cost = shape
            .and_then(|s| {
                let c = crate::model::Category::new(key.category.model.clone(), s);
                profile.lookup_wcet(&c, first).ok()
            })
            .map_or_else(|| profile.lookup_wcet(&key.category, first), Ok)?;
        if horizon.is_some_and(|h| now + cost > h) {
            return Ok(Vec::new());
        }
        self.batcher
            .early_dispatch(&key, now, true, true, profile, shape)
    }
}
