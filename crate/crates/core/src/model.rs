//! Domain types shared by every scheduling component.
//!
//! All times are integer microseconds. Nothing is rounded once a trace or a
//! profile has been ingested, so every schedule computed here is exact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An instant on the simulated clock, in microseconds.
pub type Time = u64;
/// A span of simulated time, in microseconds.
pub type Duration = u64;
pub type RequestId = u64;
pub type JobId = u64;

/// Tensor shape of one frame: channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct Shape {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl Shape {
    pub fn new(channels: u32, height: u32, width: u32) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!("{channels}x{height}x{width}")));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    /// Pixels per channel.
    pub fn area(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }

    /// Height and width halved (floor, never below 1); channels unchanged.
    pub fn halved(&self) -> Shape {
        Shape {
            channels: self.channels,
            height: (self.height / 2).max(1),
            width: (self.width / 2).max(1),
        }
    }
}

impl TryFrom<[u32; 3]> for Shape {
    type Error = Error;

    fn try_from(v: [u32; 3]) -> Result<Self> {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [u32; 3] {
    fn from(s: Shape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<&str> = s.split(['x', 'X']).collect();
        let bad = || Error::InvalidShape(s.to_string());
        if dims.len() != 3 {
            return Err(bad());
        }
        let mut parsed = [0u32; 3];
        for (slot, d) in parsed.iter_mut().zip(&dims) {
            *slot = d.trim().parse().map_err(|_| bad())?;
        }
        Shape::try_from(parsed)
    }
}

/// A (model, frame shape) pair. Only frames of equal category are batchable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Category {
    pub model: String,
    pub shape: Shape,
}

impl Category {
    pub fn new(model: impl Into<String>, shape: Shape) -> Self {
        Self {
            model: model.into(),
            shape,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.model, self.shape)
    }
}

/// Identity of a batching queue. Real-time and non-real-time requests of the
/// same category never share a queue.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueueKey {
    pub category: Category,
    pub real_time: bool,
}

impl QueueKey {
    pub fn new(category: Category, real_time: bool) -> Self {
        Self {
            category,
            real_time,
        }
    }
}

impl fmt::Display for QueueKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.real_time {
            write!(f, "{}", self.category)
        } else {
            write!(f, "{}[nrt]", self.category)
        }
    }
}

/// A periodic stream of deadline-bearing frames submitted by one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: RequestId,
    pub category: Category,
    pub period_us: Duration,
    pub relative_deadline_us: Duration,
    pub num_frames: u32,
    pub first_release_us: Time,
    pub real_time: bool,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidRequest {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if self.period_us == 0 {
            return fail("period must be positive");
        }
        if self.relative_deadline_us == 0 {
            return fail("relative deadline must be positive");
        }
        if self.num_frames == 0 {
            return fail("a request carries at least one frame");
        }
        Ok(())
    }

    pub fn key(&self) -> QueueKey {
        QueueKey::new(self.category.clone(), self.real_time)
    }

    /// Frame `seq` (0-based) of this request.
    pub fn frame(&self, seq: u32) -> Frame {
        let release_us = self.first_release_us + u64::from(seq) * self.period_us;
        Frame {
            request_id: self.id,
            seq,
            release_us,
            absolute_deadline_us: release_us + self.relative_deadline_us,
        }
    }

    pub fn last_release_us(&self) -> Time {
        self.first_release_us + u64::from(self.num_frames.saturating_sub(1)) * self.period_us
    }
}

/// One frame of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    pub request_id: RequestId,
    pub seq: u32,
    pub release_us: Time,
    pub absolute_deadline_us: Time,
}

/// Every frame of `request`, in release order.
pub fn frame_stream(request: &Request) -> Vec<Frame> {
    (0..request.num_frames).map(|i| request.frame(i)).collect()
}

/// A batch of same-queue frames, executed as one non-preemptive unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobInstance {
    pub id: JobId,
    pub key: QueueKey,
    pub frames: Vec<Frame>,
    /// Instant the batch was formed and pushed to the execution queue.
    pub release_us: Time,
    pub relative_deadline_us: Duration,
    /// Profiled cost at `exec_shape`.
    pub wcet_us: Duration,
    /// Profiled cost at the category's original shape.
    pub planned_wcet_us: Duration,
    /// Shape the batch executes at; differs from the category shape when downgraded.
    pub exec_shape: Shape,
}

impl JobInstance {
    pub fn absolute_deadline_us(&self) -> Time {
        self.release_us + self.relative_deadline_us
    }

    pub fn batch_size(&self) -> u32 {
        self.frames.len() as u32
    }

    pub fn is_downgraded(&self) -> bool {
        self.exec_shape != self.key.category.shape
    }
}

/// Per-frame outcome, decomposed into batching wait, queueing, and execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyRecord {
    pub request_id: RequestId,
    pub seq: u32,
    pub real_time: bool,
    pub release_us: Time,
    pub deadline_us: Time,
    pub batch_release_us: Time,
    pub start_us: Time,
    pub finish_us: Time,
    pub l_qb_us: Duration,
    pub l_qj_us: Duration,
    pub l_e_us: Duration,
    pub missed: bool,
    pub overdue_us: Duration,
}

impl LatencyRecord {
    /// Requires `frame.release_us <= batch_release_us <= start_us <= finish_us`.
    pub fn new(
        frame: &Frame,
        real_time: bool,
        batch_release_us: Time,
        start_us: Time,
        finish_us: Time,
    ) -> Self {
        debug_assert!(frame.release_us <= batch_release_us);
        debug_assert!(batch_release_us <= start_us && start_us <= finish_us);
        let overdue_us = finish_us.saturating_sub(frame.absolute_deadline_us);
        Self {
            request_id: frame.request_id,
            seq: frame.seq,
            real_time,
            release_us: frame.release_us,
            deadline_us: frame.absolute_deadline_us,
            batch_release_us,
            start_us,
            finish_us,
            l_qb_us: batch_release_us - frame.release_us,
            l_qj_us: start_us - batch_release_us,
            l_e_us: finish_us - start_us,
            missed: finish_us > frame.absolute_deadline_us,
            overdue_us,
        }
    }

    pub fn latency_us(&self) -> Duration {
        self.finish_us - self.release_us
    }
}
