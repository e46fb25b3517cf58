//! Time-window batching.
//!
//! Each queue divides time into back-to-back windows of length
//! `W = floor(min relative deadline / 2)`. Frames released inside
//! `[joint - W, joint)` are batched at `joint` into one job whose relative
//! deadline is `W`, so every frame's deadline lies at or after the job's.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{Duration, Frame, JobId, JobInstance, QueueKey, Request, RequestId, Shape, Time};
use crate::profile::{chunk_sizes, ExecutionProfile};

/// How non-real-time requests are batched: a long window gives their jobs
/// late deadlines, and a minimum period keeps their batches small.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonRtConfig {
    pub window_us: Duration,
    pub min_period_us: Duration,
}

impl Default for NonRtConfig {
    fn default() -> Self {
        Self {
            window_us: 1_000_000,
            min_period_us: 100_000,
        }
    }
}

/// Window length for a set of relative deadlines: half the smallest one.
pub fn window_length(deadlines: &[Duration]) -> Result<Duration> {
    let min = *deadlines.iter().min().ok_or(Error::EmptyCategory)?;
    if min < 2 {
        return Err(Error::DegenerateDeadline(min));
    }
    Ok(min / 2)
}

/// Batching state of one queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryWindowState {
    pub key: QueueKey,
    pub window_len_us: Duration,
    pub next_joint_us: Time,
    /// Frames of the current window, in arrival order.
    pub pending: Vec<Frame>,
    pub members: BTreeSet<RequestId>,
    pub min_relative_deadline_us: Duration,
}

impl CategoryWindowState {
    /// First joint strictly after `now`, following the window phase.
    pub fn upcoming_joint(&self, now: Time) -> Time {
        if self.next_joint_us > now {
            self.next_joint_us
        } else {
            let behind = (now - self.next_joint_us) / self.window_len_us + 1;
            self.next_joint_us + behind * self.window_len_us
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisBatcher {
    states: BTreeMap<QueueKey, CategoryWindowState>,
    request_keys: BTreeMap<RequestId, QueueKey>,
    next_job_id: JobId,
    nonrt: NonRtConfig,
}

impl DisBatcher {
    pub fn new(nonrt: NonRtConfig) -> Self {
        Self::restore(Vec::new(), 0, nonrt)
    }

    /// Rebuilds a batcher from captured window states.
    pub fn restore(
        states: impl IntoIterator<Item = CategoryWindowState>,
        next_job_id: JobId,
        nonrt: NonRtConfig,
    ) -> Self {
        let states: BTreeMap<_, _> = states.into_iter().map(|s| (s.key.clone(), s)).collect();
        let request_keys = states
            .values()
            .flat_map(|s| s.members.iter().map(move |&id| (id, s.key.clone())))
            .collect();
        Self {
            states,
            request_keys,
            next_job_id,
            nonrt,
        }
    }

    pub fn states(&self) -> impl Iterator<Item = &CategoryWindowState> {
        self.states.values()
    }

    pub fn state(&self, key: &QueueKey) -> Option<&CategoryWindowState> {
        self.states.get(key)
    }

    pub fn next_job_id(&self) -> JobId {
        self.next_job_id
    }

    pub fn nonrt(&self) -> &NonRtConfig {
        &self.nonrt
    }

    pub fn key_of(&self, request: RequestId) -> Option<&QueueKey> {
        self.request_keys.get(&request)
    }

    pub fn pending_frames(&self) -> usize {
        self.states.values().map(|s| s.pending.len()).sum()
    }

    /// Registers an admitted request of either kind. Returns the request as
    /// it will actually be released (non-real-time periods may be stretched)
    /// and any job formed by an early window close.
    pub fn register(
        &mut self,
        request: &Request,
        now: Time,
        profile: &ExecutionProfile,
    ) -> Result<(Request, Vec<JobInstance>)> {
        if request.real_time {
            let jobs = self.register_request(request, now, profile)?;
            Ok((request.clone(), jobs))
        } else {
            Ok((self.register_nonrt_request(request, now)?, Vec::new()))
        }
    }

    /// Registers an admitted real-time request.
    ///
    /// A request with a new minimum deadline may shrink the window. The
    /// timer then restarts at `now`, and frames already waiting are batched
    /// immediately with the new window as relative deadline; they arrived
    /// under the old, longer window, so that deadline still precedes theirs.
    pub fn register_request(
        &mut self,
        request: &Request,
        now: Time,
        profile: &ExecutionProfile,
    ) -> Result<Vec<JobInstance>> {
        request.validate()?;
        if !request.real_time {
            return Err(Error::InvalidRequest {
                id: request.id,
                reason: "non-real-time request routed to the real-time batcher".into(),
            });
        }
        if self.request_keys.contains_key(&request.id) {
            return Err(Error::DuplicateRequest(request.id));
        }
        let deadline = request.relative_deadline_us;
        let window = window_length(&[deadline])?;
        let key = request.key();

        let mut flushed = Vec::new();
        match self.states.get_mut(&key) {
            None => {
                self.states.insert(
                    key.clone(),
                    CategoryWindowState {
                        key: key.clone(),
                        window_len_us: window,
                        next_joint_us: now + window,
                        pending: Vec::new(),
                        members: BTreeSet::new(),
                        min_relative_deadline_us: deadline,
                    },
                );
            }
            Some(state) if deadline < state.min_relative_deadline_us => {
                state.min_relative_deadline_us = deadline;
                if window < state.window_len_us {
                    state.window_len_us = window;
                    state.next_joint_us = now + window;
                    let frames = std::mem::take(&mut state.pending);
                    if !frames.is_empty() {
                        flushed = self.build_jobs(&key, frames, now, window, profile, None)?;
                    }
                }
            }
            Some(_) => {}
        }
        self.join(&key, request.id);
        Ok(flushed)
    }

    /// Registers a non-real-time request in its own queue with the long
    /// non-real-time window. Returns the request with its period raised to
    /// the configured minimum.
    pub fn register_nonrt_request(&mut self, request: &Request, now: Time) -> Result<Request> {
        request.validate()?;
        if self.request_keys.contains_key(&request.id) {
            return Err(Error::DuplicateRequest(request.id));
        }
        if self.nonrt.window_us == 0 {
            return Err(Error::InvalidConfig("non-real-time window must be positive".into()));
        }
        let mut effective = request.clone();
        effective.real_time = false;
        effective.period_us = request.period_us.max(self.nonrt.min_period_us);
        let key = effective.key();
        let window = self.nonrt.window_us;
        let state = self
            .states
            .entry(key.clone())
            .or_insert_with(|| CategoryWindowState {
                key: key.clone(),
                window_len_us: window,
                next_joint_us: now + window,
                pending: Vec::new(),
                members: BTreeSet::new(),
                min_relative_deadline_us: effective.relative_deadline_us,
            });
        state.min_relative_deadline_us = state
            .min_relative_deadline_us
            .min(effective.relative_deadline_us);
        self.join(&key, effective.id);
        Ok(effective)
    }

    fn join(&mut self, key: &QueueKey, id: RequestId) {
        if let Some(state) = self.states.get_mut(key) {
            state.members.insert(id);
        }
        self.request_keys.insert(id, key.clone());
    }

    /// Adds a frame released at `now` to its queue's current window. A frame
    /// released exactly at a joint opens the next window.
    pub fn enqueue_frame(&mut self, frame: Frame, now: Time) -> Result<()> {
        let key = self
            .request_keys
            .get(&frame.request_id)
            .ok_or(Error::UnregisteredRequest(frame.request_id))?;
        let state = self.states.get_mut(key).expect("registered key has a state");
        if now >= state.next_joint_us {
            if !state.pending.is_empty() {
                return Err(Error::StaleWindow {
                    category: key.category.clone(),
                    joint: state.next_joint_us,
                    now,
                });
            }
            state.next_joint_us = state.upcoming_joint(now);
        }
        state.pending.push(frame);
        Ok(())
    }

    /// Earliest joint at which some non-empty window closes.
    pub fn next_due_joint(&self) -> Option<Time> {
        self.states
            .values()
            .filter(|s| !s.pending.is_empty())
            .map(|s| s.next_joint_us)
            .min()
    }

    /// Earliest joint after `now` across every queue, empty or not.
    pub fn earliest_upcoming_joint(&self, now: Time) -> Option<Time> {
        self.states.values().map(|s| s.upcoming_joint(now)).min()
    }

    /// Batches the window of `key` ending at `joint`. Returns no job for an
    /// empty window, several when the window holds more frames than the
    /// profile's largest batch.
    pub fn close_window(
        &mut self,
        key: &QueueKey,
        joint: Time,
        profile: &ExecutionProfile,
        exec_shape: Option<Shape>,
    ) -> Result<Vec<JobInstance>> {
        let state = self
            .states
            .get_mut(key)
            .ok_or_else(|| Error::UnknownCategory(key.category.clone()))?;
        if joint != state.next_joint_us {
            return Err(Error::StaleWindow {
                category: key.category.clone(),
                joint: state.next_joint_us,
                now: joint,
            });
        }
        let window = state.window_len_us;
        state.next_joint_us += window;
        let frames = std::mem::take(&mut state.pending);
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        self.build_jobs(key, frames, joint, window, profile, exec_shape)
    }

    /// Closes every non-empty window whose joint is `t`, in queue order.
    /// `shape_for` supplies a downgraded execution shape per queue.
    pub fn close_due(
        &mut self,
        t: Time,
        profile: &ExecutionProfile,
        shape_for: impl Fn(&QueueKey) -> Option<Shape>,
    ) -> Result<Vec<JobInstance>> {
        let due: Vec<QueueKey> = self
            .states
            .values()
            .filter(|s| !s.pending.is_empty() && s.next_joint_us == t)
            .map(|s| s.key.clone())
            .collect();
        let mut jobs = Vec::new();
        for key in due {
            let shape = shape_for(&key);
            jobs.extend(self.close_window(&key, t, profile, shape)?);
        }
        Ok(jobs)
    }

    /// Batches the pending frames of `key` ahead of the joint because the
    /// worker would otherwise idle. The job keeps the absolute deadline it
    /// would have received at the joint, so EDF priorities are unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn early_dispatch(
        &mut self,
        key: &QueueKey,
        now: Time,
        worker_idle: bool,
        queue_empty: bool,
        profile: &ExecutionProfile,
        exec_shape: Option<Shape>,
    ) -> Result<Vec<JobInstance>> {
        if !worker_idle || !queue_empty {
            return Err(Error::NotIdle);
        }
        let state = self
            .states
            .get_mut(key)
            .ok_or_else(|| Error::UnknownCategory(key.category.clone()))?;
        if state.pending.is_empty() {
            return Ok(Vec::new());
        }
        let deadline = state.next_joint_us + state.window_len_us;
        let frames = std::mem::take(&mut state.pending);
        self.build_jobs(key, frames, now, deadline - now, profile, exec_shape)
    }

    fn build_jobs(
        &mut self,
        key: &QueueKey,
        frames: Vec<Frame>,
        release: Time,
        relative_deadline: Duration,
        profile: &ExecutionProfile,
        exec_shape: Option<Shape>,
    ) -> Result<Vec<JobInstance>> {
        let category = &key.category;
        let max = profile.max_batch(category)? as usize;
        let mut jobs = Vec::new();
        let mut rest = frames.as_slice();
        for size in chunk_sizes(frames.len(), max) {
            let (chunk, tail) = rest.split_at(size);
            rest = tail;
            let planned = profile.lookup_wcet(category, size as u32)?;
            let downgraded = exec_shape
                .filter(|s| *s != category.shape)
                .and_then(|s| {
                    let c = crate::model::Category::new(category.model.clone(), s);
                    profile.lookup_wcet(&c, size as u32).ok().map(|w| (s, w))
                });
            let (shape, wcet) = downgraded.unwrap_or((category.shape, planned));
            jobs.push(JobInstance {
                id: self.next_job_id,
                key: key.clone(),
                frames: chunk.to_vec(),
                release_us: release,
                relative_deadline_us: relative_deadline,
                wcet_us: wcet,
                planned_wcet_us: planned,
                exec_shape: shape,
            });
            self.next_job_id += 1;
        }
        Ok(jobs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Category;
    use crate::profile::{synth_profile, SynthRow};

    fn shape() -> Shape {
        Shape::new(3, 224, 224).unwrap()
    }

    fn profile(max: u32) -> ExecutionProfile {
        synth_profile(&[SynthRow {
            model: "m".into(),
            shape: shape(),
            base_us: 2_000,
            per_frame_us: 1_000,
            max_batch: max,
        }])
        .unwrap()
    }

    fn request(id: u64, period: u64, deadline: u64, real_time: bool) -> Request {
        Request {
            id,
            category: Category::new("m", shape()),
            period_us: period,
            relative_deadline_us: deadline,
            num_frames: 10,
            first_release_us: 0,
            real_time,
        }
    }

    fn key() -> QueueKey {
        QueueKey::new(Category::new("m", shape()), true)
    }

    fn frame(request_id: u64, release: u64, deadline: u64) -> Frame {
        Frame {
            request_id,
            seq: 0,
            release_us: release,
            absolute_deadline_us: release + deadline,
        }
    }

    #[test]
    fn window_is_half_the_smallest_deadline() {
        assert_eq!(window_length(&[100_000, 300_000]).unwrap(), 50_000);
        assert_eq!(window_length(&[40_000]).unwrap(), 20_000);
        assert_eq!(window_length(&[]), Err(Error::EmptyCategory));
        assert_eq!(window_length(&[1]), Err(Error::DegenerateDeadline(1)));
        assert_eq!(window_length(&[3]).unwrap(), 1);
    }

    #[test]
    fn first_registration_starts_timer() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        let s = db.state(&key()).unwrap();
        assert_eq!((s.window_len_us, s.next_joint_us), (50_000, 50_000));
    }

    #[test]
    fn smaller_deadline_shrinks_and_resets() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        let flushed = db.register_request(&request(2, 10_000, 60_000, true), 10_000, &p).unwrap();
        assert!(flushed.is_empty());
        let s = db.state(&key()).unwrap();
        assert_eq!((s.window_len_us, s.next_joint_us), (30_000, 40_000));
    }

    #[test]
    fn larger_deadline_keeps_window() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        db.register_request(&request(2, 10_000, 200_000, true), 5_000, &p).unwrap();
        let s = db.state(&key()).unwrap();
        assert_eq!((s.window_len_us, s.next_joint_us), (50_000, 50_000));
        assert_eq!(s.members.len(), 2);
    }

    #[test]
    fn shrink_flushes_waiting_frames_with_valid_deadline() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        db.enqueue_frame(frame(1, 1_000, 100_000), 1_000).unwrap();
        let jobs = db.register_request(&request(2, 10_000, 80_000, true), 49_000, &p).unwrap();
        assert_eq!(jobs.len(), 1);
        let job = &jobs[0];
        assert_eq!(job.release_us, 49_000);
        assert_eq!(job.absolute_deadline_us(), 89_000);
        assert!(job.absolute_deadline_us() <= 101_000);
        assert_eq!(db.state(&key()).unwrap().next_joint_us, 89_000);
    }

    #[test]
    fn duplicate_registration_fails() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        assert_eq!(
            db.register_request(&request(1, 10_000, 100_000, true), 0, &p),
            Err(Error::DuplicateRequest(1))
        );
    }

    #[test]
    fn frames_of_two_requests_share_a_window() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        db.register_request(&request(2, 10_000, 100_000, true), 0, &p).unwrap();
        db.enqueue_frame(frame(1, 10_000, 100_000), 10_000).unwrap();
        assert_eq!(db.pending_frames(), 1);
        db.enqueue_frame(frame(2, 20_000, 100_000), 20_000).unwrap();
        let jobs = db.close_window(&key(), 50_000, &p, None).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].batch_size(), 2);
    }

    #[test]
    fn unknown_request_frame_fails() {
        let mut db = DisBatcher::new(NonRtConfig::default());
        assert_eq!(
            db.enqueue_frame(frame(9, 0, 10), 0),
            Err(Error::UnregisteredRequest(9))
        );
    }

    #[test]
    fn close_window_forms_job() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 25_000, 100_000, true), 50_000, &p).unwrap();
        db.enqueue_frame(frame(1, 60_000, 100_000), 60_000).unwrap();
        db.enqueue_frame(frame(1, 85_000, 100_000), 85_000).unwrap();
        let jobs = db.close_window(&key(), 100_000, &p, None).unwrap();
        assert_eq!(jobs.len(), 1);
        let j = &jobs[0];
        assert_eq!((j.release_us, j.absolute_deadline_us(), j.batch_size()), (100_000, 150_000, 2));
        assert_eq!(j.wcet_us, 4_000);
        assert_eq!(db.state(&key()).unwrap().next_joint_us, 150_000);
    }

    #[test]
    fn empty_window_advances_joint() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 25_000, 100_000, true), 0, &p).unwrap();
        assert!(db.close_window(&key(), 50_000, &p, None).unwrap().is_empty());
        assert_eq!(db.state(&key()).unwrap().next_joint_us, 100_000);
    }

    #[test]
    fn three_frames_cost_affine() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 1_000, 100_000, true), 0, &p).unwrap();
        for t in [1_000, 2_000, 3_000] {
            db.enqueue_frame(frame(1, t, 100_000), t).unwrap();
        }
        let jobs = db.close_window(&key(), 50_000, &p, None).unwrap();
        assert_eq!(jobs[0].wcet_us, 5_000);
    }

    #[test]
    fn overflowing_window_splits() {
        let p = profile(2);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 1_000, 100_000, true), 0, &p).unwrap();
        for t in 1..=5 {
            db.enqueue_frame(frame(1, t * 1_000, 100_000), t * 1_000).unwrap();
        }
        let jobs = db.close_window(&key(), 50_000, &p, None).unwrap();
        let sizes: Vec<_> = jobs.iter().map(|j| j.batch_size()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert!(jobs.iter().all(|j| j.absolute_deadline_us() == 100_000));
        assert_eq!(jobs.iter().map(|j| j.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn frame_at_joint_opens_next_window() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 50_000, 100_000, true), 0, &p).unwrap();
        // no frames in the first window; the joint at 50 000 passes unprocessed
        db.enqueue_frame(frame(1, 50_000, 100_000), 50_000).unwrap();
        assert_eq!(db.state(&key()).unwrap().next_joint_us, 100_000);
    }

    #[test]
    fn early_dispatch_keeps_joint_deadline() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 25_000, 100_000, true), 0, &p).unwrap();
        assert!(db.close_window(&key(), 50_000, &p, None).unwrap().is_empty());
        assert!(db.close_window(&key(), 100_000, &p, None).unwrap().is_empty());
        db.enqueue_frame(frame(1, 110_000, 100_000), 110_000).unwrap();
        let jobs = db.early_dispatch(&key(), 120_000, true, true, &p, None).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].release_us, 120_000);
        assert_eq!(jobs[0].absolute_deadline_us(), 200_000);
        assert_eq!(db.state(&key()).unwrap().next_joint_us, 150_000);
        assert_eq!(db.pending_frames(), 0);
    }

    #[test]
    fn early_dispatch_requires_idle() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 25_000, 100_000, true), 0, &p).unwrap();
        assert_eq!(
            db.early_dispatch(&key(), 10, false, true, &p, None),
            Err(Error::NotIdle)
        );
        assert!(db.early_dispatch(&key(), 10, true, true, &p, None).unwrap().is_empty());
    }

    #[test]
    fn nonrt_requests_are_isolated() {
        let p = profile(8);
        let cfg = NonRtConfig {
            window_us: 1_000_000,
            min_period_us: 100_000,
        };
        let mut db = DisBatcher::new(cfg);
        db.register_request(&request(1, 10_000, 100_000, true), 0, &p).unwrap();
        let eff = db.register_nonrt_request(&request(2, 10_000, 100_000, false), 0).unwrap();
        assert_eq!(eff.period_us, 100_000);
        assert_eq!(db.states().count(), 2);
        let nrt = QueueKey::new(Category::new("m", shape()), false);
        assert_eq!(db.state(&nrt).unwrap().window_len_us, 1_000_000);
        let frames: Vec<_> = crate::model::frame_stream(&eff)
            .iter()
            .map(|f| f.release_us)
            .take(3)
            .collect();
        assert_eq!(frames, vec![0, 100_000, 200_000]);
    }

    #[test]
    fn downgraded_shape_uses_half_table() {
        let p = profile(8);
        let mut db = DisBatcher::new(NonRtConfig::default());
        db.register_request(&request(1, 1_000, 100_000, true), 0, &p).unwrap();
        db.enqueue_frame(frame(1, 1_000, 100_000), 1_000).unwrap();
        let jobs = db
            .close_window(&key(), 50_000, &p, Some(shape().halved()))
            .unwrap();
        assert_eq!(jobs[0].planned_wcet_us, 3_000);
        assert_eq!(jobs[0].wcet_us, 2_250);
        assert!(jobs[0].is_downgraded());
    }
}
