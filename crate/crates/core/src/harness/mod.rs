//! Experiment apparatus: traces, execution models, the simulation engine,
//! baseline policies, metrics, and file formats.

pub mod baselines;
pub mod engine;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod trace;

pub use engine::{run_simulation, BatchSize, PolicyConfig, SimOptions, SimOutcome};
pub use metrics::{compute_metrics, Metrics};
pub use trace::{gen_trace, ArrivalModel, TraceConfig};
