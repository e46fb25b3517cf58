use thiserror::Error;

use crate::model::{Category, JobId, RequestId, Time};

/// Errors raised by the scheduling library.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid shape {0}: every dimension must be at least 1")]
    InvalidShape(String),

    #[error("invalid request {id}: {reason}")]
    InvalidRequest { id: RequestId, reason: String },

    #[error("no profile entries for category {0}")]
    UnknownCategory(Category),

    #[error("batch size {batch} exceeds profiled maximum {max} for {category}")]
    BatchTooLarge {
        category: Category,
        batch: u32,
        max: u32,
    },

    #[error("category {0} appears more than once")]
    DuplicateCategory(Category),

    #[error("profile parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("profile for {category} decreases from batch {batch} to {next}")]
    MonotonicityViolation {
        category: Category,
        batch: u32,
        next: u32,
    },

    #[error("profile for {category} is missing batch size {batch}")]
    MissingBatchSize { category: Category, batch: u32 },

    #[error("cannot derive a window length from an empty deadline set")]
    EmptyCategory,

    #[error("relative deadline {0} us is too small to form a window")]
    DegenerateDeadline(u64),

    #[error("request {0} is already registered")]
    DuplicateRequest(RequestId),

    #[error("frame of request {0} has no registered category")]
    UnregisteredRequest(RequestId),

    #[error("window of {category} closed late: joint {joint} us is before {now} us")]
    StaleWindow {
        category: Category,
        joint: Time,
        now: Time,
    },

    #[error("early dispatch requires an idle worker and an empty queue")]
    NotIdle,

    #[error("worker is busy until {0} us")]
    WorkerBusy(Time),

    #[error("job {job} started at {now} us before its release {release} us")]
    EarlyStart { job: JobId, now: Time, release: Time },

    #[error("execution queue is empty")]
    EmptyQueue,

    #[error("pseudo-job list is not sorted by release time at index {0}")]
    UnsortedInput(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
