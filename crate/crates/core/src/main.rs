use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use edgesched::admission::Verdict;
use edgesched::edf::{ExecModel, ProfiledExec};
use edgesched::harness::exec::{inject_overruns, Injection, Jitter};
use edgesched::harness::io::{load_trace, save_trace, summary_json, write_frames, Summary};
use edgesched::harness::trace::default_pool;
use edgesched::harness::{gen_trace, run_simulation, ArrivalModel, PolicyConfig, SimOptions, SimOutcome, TraceConfig};
use edgesched::profile::{desktop_rows, load_profile, save_profile, synth_profile, write_profile, SynthRow};
use edgesched::{Category, Error, ExecutionProfile, Result, Shape};

#[derive(Parser, Debug)]
#[command(name = "edgesched", version, about = "Batched soft real-time inference scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or check execution profiles
    #[command(subcommand)]
    Profile(ProfileCommand),
    /// Synthesize request traces
    #[command(subcommand)]
    Trace(TraceCommand),
    /// Stream a trace through admission control and report each decision
    Admit(AdmitArgs),
    /// Simulate one policy over a trace
    Run(RunArgs),
    /// Simulate several policies over the same admitted requests
    Compare(CompareArgs),
}

#[derive(Subcommand, Debug)]
enum ProfileCommand {
    /// Affine profile: wcet(b) = base + b * per_frame. Repeat the row flags
    /// once per model; half-resolution tables are added automatically.
    Synth(SynthArgs),
    /// Load a profile file and report its size
    Validate {
        path: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    model: Vec<String>,
    #[arg(long)]
    shape: Vec<Shape>,
    #[arg(long)]
    base_us: Vec<u64>,
    #[arg(long)]
    per_frame_us: Vec<u64>,
    #[arg(long)]
    max_batch: Vec<u32>,
    /// Built-in rows ("desktop"); uses every --shape given, or 3x224x224
    #[arg(long)]
    preset: Option<String>,
    /// Output file; stdout if absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum TraceCommand {
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 25)]
    requests: usize,
    #[arg(long, default_value_t = 50.0)]
    mean_period_ms: f64,
    #[arg(long, default_value_t = 50.0)]
    mean_deadline_ms: f64,
    #[arg(long, default_value_t = 200)]
    frames: u32,
    /// Mean of exponential inter-arrival gaps
    #[arg(long, default_value_t = 1000.0, conflicts_with = "arrival_fixed_ms")]
    arrival_mean_ms: f64,
    /// Fixed inter-arrival gap instead of exponential
    #[arg(long)]
    arrival_fixed_ms: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    nonrt_fraction: f64,
    /// Category pool as model@CxHxW; default: the six desktop models at 3x224x224
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CommonArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args, Debug)]
struct AdmitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// deeprt or sedf
    #[arg(long, default_value = "deeprt")]
    policy: String,
    #[arg(long)]
    no_phase1: bool,
}

#[derive(Args, Debug)]
struct ExecArgs {
    #[arg(long)]
    no_early_dispatch: bool,
    #[arg(long)]
    no_adaptation: bool,
    /// Seed for runtime jitter
    #[arg(long)]
    seed: Option<u64>,
    /// Shorten each job by a uniform fraction of its WCET, up to this much
    #[arg(long)]
    jitter: Option<f64>,
    /// Add extra_us to count consecutive jobs from dispatch index start
    #[arg(long, value_name = "START:COUNT:EXTRA_US")]
    inject: Option<Injection>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "deeprt")]
    policy: String,
    #[command(flatten)]
    exec: ExecArgs,
    /// Trace file of previously admitted requests; runs exactly those, without admission
    #[arg(long)]
    replay_admitted: Option<PathBuf>,
    /// Directory for frames.csv, summary.json, and admitted.json; summary to stdout if absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "deeprt,aimd,batch,batch-delay")]
    policies: Vec<String>,
    #[command(flatten)]
    exec: ExecArgs,
    /// Feed every policy the full trace instead of the requests admission accepts
    #[arg(long)]
    no_replay: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(ProfileCommand::Synth(a)) => cmd_profile_synth(a),
        Command::Profile(ProfileCommand::Validate { path }) => {
            let p = load_profile(&path)?;
            println!("{} categories, {} entries", p.categories().count(), p.entry_count());
            Ok(())
        }
        Command::Trace(TraceCommand::Gen(a)) => cmd_trace_gen(a),
        Command::Admit(a) => cmd_admit(a),
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn cmd_profile_synth(a: SynthArgs) -> Result<()> {
    let rows = match a.preset.as_deref() {
        Some("desktop") => {
            if !a.model.is_empty() {
                return Err(Error::InvalidConfig("--preset cannot be combined with --model".into()));
            }
            let shapes = if a.shape.is_empty() {
                vec![Shape::new(3, 224, 224)?]
            } else {
                a.shape.clone()
            };
            desktop_rows(&shapes, a.max_batch.first().copied().unwrap_or(32))
        }
        Some(other) => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        None => {
            let n = a.model.len();
            if n == 0 {
                return Err(Error::InvalidConfig("give --model rows or --preset".into()));
            }
            if [a.shape.len(), a.base_us.len(), a.per_frame_us.len(), a.max_batch.len()] != [n; 4] {
                return Err(Error::InvalidConfig(
                    "--model, --shape, --base-us, --per-frame-us, --max-batch must repeat equally".into(),
                ));
            }
            (0..n)
                .map(|i| SynthRow {
                    model: a.model[i].clone(),
                    shape: a.shape[i],
                    base_us: a.base_us[i],
                    per_frame_us: a.per_frame_us[i],
                    max_batch: a.max_batch[i],
                })
                .collect()
        }
    };
    let profile = synth_profile(&rows)?;
    match a.out {
        Some(path) => save_profile(&profile, &path),
        None => write_profile(&profile, std::io::stdout().lock()),
    }
}

fn chosen_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        eprintln!("seed: {s}");
        s
    })
}

fn parse_category(s: &str) -> Result<Category> {
    let (model, shape) = s
        .split_once('@')
        .ok_or_else(|| Error::InvalidConfig(format!("category {s:?} is not model@CxHxW")))?;
    Ok(Category::new(model, shape.parse()?))
}

fn cmd_trace_gen(a: GenArgs) -> Result<()> {
    let categories = if a.categories.is_empty() {
        default_pool()
    } else {
        a.categories.iter().map(|c| parse_category(c)).collect::<Result<_>>()?
    };
    let arrival = match a.arrival_fixed_ms {
        Some(ms) => ArrivalModel::Fixed {
            interval_us: (ms * 1_000.0).round() as u64,
        },
        None => ArrivalModel::Exponential {
            mean_us: a.arrival_mean_ms * 1_000.0,
        },
    };
    let config = TraceConfig {
        seed: chosen_seed(a.seed),
        num_requests: a.requests,
        mean_period_us: a.mean_period_ms * 1_000.0,
        mean_deadline_us: a.mean_deadline_ms * 1_000.0,
        arrival,
        categories,
        frames_per_request: a.frames,
        nonrt_fraction: a.nonrt_fraction,
        ..TraceConfig::default()
    };
    let trace = gen_trace(&config)?;
    match a.out {
        Some(path) => save_trace(&trace, &path),
        None => {
            println!("{}", edgesched::harness::io::trace_to_json(&trace)?);
            Ok(())
        }
    }
}

fn load_inputs(c: &CommonArgs) -> Result<(ExecutionProfile, Vec<edgesched::Request>)> {
    Ok((load_profile(&c.profile)?, load_trace(&c.trace)?))
}

fn cmd_admit(a: AdmitArgs) -> Result<()> {
    let (profile, trace) = load_inputs(&a.common)?;
    let policy: PolicyConfig = a.policy.parse()?;
    if policy.is_baseline() {
        return Err(Error::InvalidConfig(format!("{policy} has no admission control")));
    }
    let options = SimOptions {
        phase1: !a.no_phase1,
        ..SimOptions::guaranteed()
    };
    let out = run_simulation(&trace, &policy, &profile, &mut ProfiledExec, &options)?;
    println!("request_id,decision,phase,utilization,predicted_max_latency_us,reason");
    for d in &out.admissions {
        let (decision, phase) = match d.verdict {
            Verdict::Admitted => ("admitted", String::from("-")),
            Verdict::Rejected(p) => ("rejected", p.to_string()),
        };
        let util = d
            .report
            .as_ref()
            .map_or_else(|| "-".to_string(), |r| format!("{:.6}", r.total_f64()));
        let latency = d
            .prediction
            .as_ref()
            .and_then(|p| p.max_latency_us())
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        let reason = d.reason.as_deref().unwrap_or("").replace(',', ";");
        println!("{},{decision},{phase},{util},{latency},{reason}", d.request_id);
    }
    Ok(())
}

fn exec_model(e: &ExecArgs) -> Result<Box<dyn ExecModel>> {
    let base: Box<dyn ExecModel> = match e.jitter {
        Some(f) => Box::new(Jitter::new(chosen_seed(e.seed), f)?),
        None => Box::new(ProfiledExec),
    };
    Ok(match e.inject {
        Some(i) => Box::new(inject_overruns(base, i)),
        None => base,
    })
}

fn sim_options(e: &ExecArgs) -> SimOptions {
    SimOptions {
        early_dispatch: !e.no_early_dispatch,
        adaptation: !e.no_adaptation,
        ..SimOptions::default()
    }
}

fn write_outcome(dir: &Path, outcome: &SimOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_frames(&outcome.metrics, fs::File::create(dir.join("frames.csv"))?)?;
    let mut s = summary_json(&Summary::from(&outcome.metrics))?;
    s.push('\n');
    fs::write(dir.join("summary.json"), s)?;
    save_trace(&outcome.admitted, &dir.join("admitted.json"))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (profile, trace) = load_inputs(&a.common)?;
    let policy: PolicyConfig = a.policy.parse()?;
    let mut options = sim_options(&a.exec);
    if let Some(path) = &a.replay_admitted {
        let ids: BTreeSet<_> = load_trace(path)?.iter().map(|r| r.id).collect();
        options.replay_admitted = Some(ids);
    }
    let mut exec = exec_model(&a.exec)?;
    let outcome = run_simulation(&trace, &policy, &profile, &mut exec, &options)?;
    match &a.out {
        Some(dir) => write_outcome(dir, &outcome)?,
        None => println!("{}", summary_json(&Summary::from(&outcome.metrics))?),
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let (profile, trace) = load_inputs(&a.common)?;
    let mut policies: Vec<PolicyConfig> = a.policies.iter().map(|p| p.parse()).collect::<Result<_>>()?;
    policies.sort_by_key(|p| p.name());
    policies.dedup_by_key(|p| p.name());
    if a.exec.jitter.is_some() && a.exec.seed.is_none() {
        return Err(Error::InvalidConfig("compare with --jitter needs --seed so every policy sees the same draws".into()));
    }
    let options = sim_options(&a.exec);

    // admission decides the shared request set
    let reference = if a.no_replay {
        None
    } else {
        let mut exec = exec_model(&a.exec)?;
        Some(run_simulation(&trace, &PolicyConfig::DeepRt, &profile, &mut exec, &options)?)
    };
    let shared = reference
        .as_ref()
        .map(|out| out.admitted.iter().map(|r| r.id).collect::<BTreeSet<_>>());

    let results: Vec<Result<SimOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .filter(|p| reference.is_none() || **p != PolicyConfig::DeepRt)
            .map(|policy| {
                let options = SimOptions {
                    replay_admitted: shared.clone(),
                    ..options.clone()
                };
                let (profile, trace, exec_args) = (&profile, &trace, &a.exec);
                s.spawn(move || {
                    let mut exec = exec_model(exec_args)?;
                    run_simulation(trace, policy, profile, &mut exec, &options)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidConfig("simulation thread panicked".into()))))
            .collect()
    });

    let mut results = results.into_iter();
    let mut reference = reference;
    let mut summaries = Vec::new();
    for policy in &policies {
        // the admitting run itself stands for DeepRT, rejection counts included
        let outcome = match (policy, reference.take()) {
            (PolicyConfig::DeepRt, Some(out)) => out,
            (_, r) => {
                reference = r;
                results.next().expect("one result per spawned policy")?
            }
        };
        if let Some(dir) = &a.out {
            write_outcome(&dir.join(policy.name()), &outcome)?;
        }
        summaries.push(Summary::from(&outcome.metrics));
    }
    let text = serde_json::to_string_pretty(&summaries).map_err(|e| Error::Io(e.to_string()))?;
    match &a.out {
        Some(dir) => fs::write(dir.join("summary.json"), text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
