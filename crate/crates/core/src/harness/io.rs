//! Trace, per-frame table, and summary file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::Metrics;
use crate::model::{Category, Duration, Request, RequestId, Shape, Time};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub id: RequestId,
    pub model: String,
    pub shape: Shape,
    pub period_us: Duration,
    pub deadline_us: Duration,
    pub num_frames: u32,
    pub first_release_us: Time,
    pub real_time: bool,
}

impl From<&Request> for TraceRequest {
    fn from(r: &Request) -> Self {
        Self {
            id: r.id,
            model: r.category.model.clone(),
            shape: r.category.shape,
            period_us: r.period_us,
            deadline_us: r.relative_deadline_us,
            num_frames: r.num_frames,
            first_release_us: r.first_release_us,
            real_time: r.real_time,
        }
    }
}

impl From<TraceRequest> for Request {
    fn from(r: TraceRequest) -> Self {
        Self {
            id: r.id,
            category: Category::new(r.model, r.shape),
            period_us: r.period_us,
            relative_deadline_us: r.deadline_us,
            num_frames: r.num_frames,
            first_release_us: r.first_release_us,
            real_time: r.real_time,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFile {
    pub requests: Vec<TraceRequest>,
}

pub fn trace_to_json(trace: &[Request]) -> Result<String> {
    let file = TraceFile {
        requests: trace.iter().map(TraceRequest::from).collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Io(e.to_string()))
}

pub fn trace_from_json(text: &str) -> Result<Vec<Request>> {
    let file: TraceFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let trace: Vec<Request> = file.requests.into_iter().map(Request::from).collect();
    for r in &trace {
        r.validate()?;
    }
    Ok(trace)
}

pub fn save_trace(trace: &[Request], path: &Path) -> Result<()> {
    let mut text = trace_to_json(trace)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>> {
    trace_from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Serialize)]
struct FrameRow {
    frame_id: u32,
    request_id: RequestId,
    release_us: Time,
    batch_release_us: Time,
    start_us: Time,
    finish_us: Time,
    deadline_us: Time,
    missed: u8,
    overdue_us: Duration,
}

/// Per-frame table; `frame_id` is the frame's sequence number within its request.
pub fn write_frames<W: Write>(metrics: &Metrics, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &metrics.records {
        w.serialize(FrameRow {
            frame_id: r.seq,
            request_id: r.request_id,
            release_us: r.release_us,
            batch_release_us: r.batch_release_us,
            start_us: r.start_us,
            finish_us: r.finish_us,
            deadline_us: r.deadline_us,
            missed: u8::from(r.missed),
            overdue_us: r.overdue_us,
        })
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub miss_rate: f64,
    pub throughput_fps: f64,
    pub admitted: usize,
    pub rejected_phase1: usize,
    pub rejected_phase2: usize,
}

impl From<&Metrics> for Summary {
    fn from(m: &Metrics) -> Self {
        Self {
            policy: m.policy.clone(),
            miss_rate: m.miss_rate,
            throughput_fps: m.throughput_fps,
            admitted: m.admitted,
            rejected_phase1: m.rejected_phase1,
            rejected_phase2: m.rejected_phase2,
        }
    }
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    serde_json::to_string_pretty(summary).map_err(|e| Error::Io(e.to_string()))
}
