//! Batched inference scheduling on a single accelerator: per-category time
//! windows, non-preemptive EDF, two-phase admission control, and overrun
//! adaptation, plus a discrete-event harness with baseline policies.

pub mod adaptation;
pub mod admission;
pub mod disbatcher;
pub mod edf;
pub mod error;
pub mod harness;
pub mod model;
pub mod profile;
pub mod system;

pub use error::{Error, Result};
pub use model::{Category, Duration, Frame, JobId, JobInstance, LatencyRecord, QueueKey, Request, RequestId, Shape, Time};
pub use profile::ExecutionProfile;
