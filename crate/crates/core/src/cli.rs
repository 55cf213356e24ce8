// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: planning over traces, parameter sweeps and
//! profile fitting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::autoscaler::ScalingPlan;
use crate::bundled;
use crate::metrics::{write_rows, MetricsError, ReportRow, SavingsReport};
use crate::perfmodel::{fit_profile, read_samples, FitReport, OperatorKind, PerfError, Phase, ProfileSet, Sample};
use crate::placement::Placement;
use crate::scenario::{
    parse_range, resolve_dag, resolve_fleet, resolve_profiles, sweep_rows, Mode, PlacementMode, PointRun, Scenario,
    ScenarioError, SloSpec, SweepAxis, DEFAULT_SLO_DECODE, DEFAULT_SLO_PREFILL,
};
use crate::workload::{
    aggregate_point, load_trace, parse_trace, synth_workload, windowize, RequestRecord, SynthSpec, WorkloadError,
    WorkloadPoint, DEFAULT_QUANTILE, DEFAULT_WINDOW_LEN,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("fitting `{op}`: {source}")]
    Fit { op: String, source: PerfError },
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Parser)]
#[command(name = "opscale", version, about = "Operator-level autoscaling and placement planner for LLM inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan and place every window of a trace.
    Autoscale(AutoscaleArgs),
    /// Compare operator-level and model-level plans along one axis.
    Sweep(SweepArgs),
    /// Fit latency profiles from timing samples.
    Fit(FitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Operator graph: a JSON file or a bundled name.
    #[arg(long, default_value = "dense-7b")]
    pub dag: String,
    /// Profile set: a JSON file or a bundled name. Defaults to the graph's bundled name.
    #[arg(long)]
    pub profiles: Option<String>,
    #[arg(long, default_value = "default")]
    pub fleet: String,
    /// Seconds, or a multiple of the unloaded latency such as `2.5x`.
    #[arg(long, default_value_t = DEFAULT_SLO_PREFILL)]
    pub slo_prefill: SloSpec,
    #[arg(long, default_value_t = DEFAULT_SLO_DECODE)]
    pub slo_decode: SloSpec,
    /// Band below the latency target, in seconds, inside which the search stops downscaling.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
    #[arg(long, default_value_t = Mode::Operator)]
    pub mode: Mode,
    #[arg(long, default_value_t = PlacementMode::Shared)]
    pub placement: PlacementMode,
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["trace", "synth"])))]
pub struct WorkloadArgs {
    /// Trace CSV, or a bundled trace name.
    #[arg(long)]
    pub trace: Option<String>,
    /// Synthetic workload such as `diurnal:rate=40,duration=600`.
    #[arg(long)]
    pub synth: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seconds per planning window.
    #[arg(long, default_value_t = DEFAULT_WINDOW_LEN)]
    pub window_len: f64,
    /// Input-length quantile that represents a window.
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    pub quantile: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Prefill,
    Decode,
    Both,
}

impl PhaseArg {
    fn includes(self, phase: Phase) -> bool {
        match self {
            PhaseArg::Both => true,
            PhaseArg::Prefill => phase == Phase::Prefill,
            PhaseArg::Decode => phase == Phase::Decode,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AutoscaleArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long, value_enum, default_value_t = PhaseArg::Both)]
    pub phase: PhaseArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(long)]
    pub sweep: SweepAxis,
    /// `a,b,c`, `start:stop:step` or `start:stop:*factor`; `k` means ×1024.
    #[arg(long)]
    pub range: String,
    #[arg(long, default_value_t = Phase::Prefill)]
    pub phase: Phase,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// CSV with header `op,phase,batch,seqlen,parallelism,latency_us`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Profile set whose kinds and non-latency fields are kept.
    #[arg(long)]
    pub profiles: Option<String>,
    /// Operator kind as `op=kind`; repeatable.
    #[arg(long = "kind")]
    pub kinds: Vec<String>,
    /// Parallel efficiency for operators not in `--profiles`.
    #[arg(long, default_value_t = crate::perfmodel::DEFAULT_PARALLEL_EFFICIENCY)]
    pub eta: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-window artefact written to `plan.json` / `placement.json`.
#[derive(Serialize)]
struct WindowEntry<'a, T: Serialize> {
    phase: Phase,
    window_start: f64,
    window_end: f64,
    qps: f64,
    seq_len: u32,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct PlanBody<'a> {
    plan: &'a ScalingPlan,
}

#[derive(Serialize)]
struct PlacementBody<'a> {
    placement: &'a Placement,
}

#[derive(Serialize)]
struct MetricsBody<'a> {
    report: &'a SavingsReport,
}

/// Whether every planned point met its latency target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub all_feasible: bool,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        if self.all_feasible {
            EXIT_OK
        } else {
            EXIT_INFEASIBLE
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Autoscale(a) => cmd_autoscale(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Fit(a) => cmd_fit(&a),
    }
}

pub fn build_scenario(args: &ScenarioArgs) -> Result<Scenario, CliError> {
    if !(args.epsilon >= 0.0 && args.epsilon.is_finite()) {
        return Err(CliError::Invalid { field: "--epsilon", message: format!("must be >= 0, got {}", args.epsilon) });
    }
    let dag = resolve_dag(&args.dag)?;
    let profiles = match &args.profiles {
        Some(p) => resolve_profiles(p)?,
        None if bundled::profiles(&args.dag).is_some() => resolve_profiles(&args.dag)?,
        None => {
            return Err(CliError::Invalid {
                field: "--profiles",
                message: format!("required when --dag `{}` is not a bundled graph", args.dag),
            })
        }
    };
    for n in dag.nodes() {
        if profiles.get(&n.profile_ref).is_err() {
            return Err(CliError::Invalid {
                field: "--profiles",
                message: format!("no profile `{}` for operator `{}`", n.profile_ref, n.id),
            });
        }
    }
    let fleet = resolve_fleet(&args.fleet)?;
    let mut s = Scenario::new(dag, profiles, fleet);
    s.slo_prefill = args.slo_prefill;
    s.slo_decode = args.slo_decode;
    s.epsilon = args.epsilon;
    Ok(s)
}

pub fn load_records(args: &WorkloadArgs) -> Result<Vec<RequestRecord>, CliError> {
    if !(args.window_len > 0.0 && args.window_len.is_finite()) {
        return Err(CliError::Invalid { field: "--window-len", message: format!("must be positive, got {}", args.window_len) });
    }
    if !(args.quantile > 0.0 && args.quantile <= 1.0) {
        return Err(CliError::Invalid { field: "--quantile", message: format!("must lie in (0, 1], got {}", args.quantile) });
    }
    let records = match (&args.trace, &args.synth) {
        (Some(t), None) => {
            if Path::new(t).exists() {
                load_trace(Path::new(t))?
            } else if let Some(text) = bundled::trace(t) {
                parse_trace(text.as_bytes())?
            } else {
                return Err(CliError::Invalid { field: "--trace", message: format!("no file or bundled trace `{t}`") });
            }
        }
        (None, Some(s)) => {
            let spec: SynthSpec = s.parse()?;
            synth_workload(&spec, args.seed)?
        }
        _ => {
            return Err(CliError::Invalid { field: "--trace/--synth", message: "give exactly one".into() });
        }
    };
    if records.is_empty() {
        return Err(WorkloadError::EmptyTrace.into());
    }
    Ok(records)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}

fn entries<'a, T: Serialize>(runs: &'a [PointRun], body: impl Fn(&'a PointRun) -> T) -> Vec<(WorkloadPoint, T)> {
    runs.iter().map(|r| (r.point, body(r))).collect()
}

fn window_json<T: Serialize>(items: &[(WorkloadPoint, T)]) -> Vec<u8> {
    let list: Vec<WindowEntry<'_, T>> = items
        .iter()
        .map(|(p, body)| WindowEntry {
            phase: p.phase,
            window_start: p.window.0,
            window_end: p.window.1,
            qps: p.qps,
            seq_len: p.seq_len,
            body,
        })
        .collect();
    to_json(&list)
}

pub fn cmd_autoscale(args: &AutoscaleArgs) -> Result<Outcome, CliError> {
    let scenario = build_scenario(&args.scenario)?;
    let records = load_records(&args.workload)?;
    let windows = windowize(&records, args.workload.window_len, args.workload.quantile)?;
    let mut points = Vec::new();
    for (prefill, decode) in windows {
        for p in [prefill, decode] {
            if args.phase.includes(p.phase) && p.qps > 0.0 {
                points.push(p);
            }
        }
    }
    if points.is_empty() {
        return Err(WorkloadError::EmptyTrace.into());
    }
    info!("planning {} window points", points.len());
    let (mode, placement) = (args.scenario.mode, args.scenario.placement);
    let runs: Vec<PointRun> = points
        .par_iter()
        .map(|p| scenario.run_point(p, mode, placement))
        .collect::<Result<_, _>>()?;

    ensure_dir(&args.out)?;
    write_file(&args.out.join("plan.json"), &window_json(&entries(&runs, |r| PlanBody { plan: &r.candidate_plan })))?;
    write_file(
        &args.out.join("placement.json"),
        &window_json(&entries(&runs, |r| PlacementBody { placement: &r.candidate_placement })),
    )?;
    write_file(&args.out.join("metrics.json"), &window_json(&entries(&runs, |r| MetricsBody { report: &r.report })))?;
    let rows: Vec<ReportRow> =
        runs.iter().map(|r| ReportRow::new(&r.point.phase.to_string(), r.point.window.0, &r.report)).collect();
    let mut csv = Vec::new();
    write_rows(&mut csv, &rows)?;
    write_file(&args.out.join("metrics.csv"), &csv)?;

    let infeasible = runs.iter().filter(|r| !r.feasible()).count();
    if infeasible > 0 {
        warn!("{infeasible} of {} points miss their latency target", runs.len());
    }
    Ok(Outcome { all_feasible: infeasible == 0 })
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Outcome, CliError> {
    let scenario = build_scenario(&args.scenario)?;
    let values = parse_range(&args.range).map_err(|message| CliError::Invalid { field: "--range", message })?;
    let records = load_records(&args.workload)?;
    let base = aggregate_point(&records, args.phase, args.workload.quantile)?;
    info!("sweeping {} over {} values around qps {:.3}, seq_len {}", args.sweep, values.len(), base.qps, base.seq_len);
    let runs = scenario.sweep(args.sweep, &values, &base, args.scenario.mode, args.scenario.placement)?;
    let rows = sweep_rows(args.sweep, &values, &runs);
    ensure_dir(&args.out)?;
    let mut csv = Vec::new();
    write_rows(&mut csv, &rows)?;
    write_file(&args.out.join("sweep.csv"), &csv)?;
    Ok(Outcome { all_feasible: runs.iter().all(PointRun::feasible) })
}

fn parse_kind(spec: &str) -> Result<(String, OperatorKind), CliError> {
    let bad = |message: String| CliError::Invalid { field: "--kind", message };
    let (op, kind) = spec.split_once('=').ok_or_else(|| bad(format!("expected op=kind, got `{spec}`")))?;
    let kind: OperatorKind = serde_json::from_value(serde_json::Value::String(kind.trim().to_string()))
        .map_err(|_| bad(format!("unknown operator kind `{}`", kind.trim())))?;
    Ok((op.trim().to_string(), kind))
}

pub fn cmd_fit(args: &FitArgs) -> Result<Outcome, CliError> {
    let file = fs::File::open(&args.samples).map_err(|source| CliError::Io { path: args.samples.clone(), source })?;
    let samples = read_samples(file)?;
    let mut set = match &args.profiles {
        Some(p) => resolve_profiles(p)?,
        None => ProfileSet::new(BTreeMap::new()),
    };
    let kinds: BTreeMap<String, OperatorKind> = args.kinds.iter().map(|k| parse_kind(k)).collect::<Result<_, _>>()?;

    let mut by_op: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    for s in &samples {
        by_op.entry(&s.op).or_default().push(s.clone());
    }
    let mut reports: BTreeMap<String, FitReport> = BTreeMap::new();
    for (op, rows) in by_op {
        let mut profile = set.profiles.get(op).cloned().unwrap_or_else(|| crate::perfmodel::OperatorProfile {
            eta: args.eta,
            ..Default::default()
        });
        if let Some(&k) = kinds.get(op) {
            profile.kind = k;
        }
        let report =
            fit_profile(&rows, profile.kind, profile.eta).map_err(|source| CliError::Fit { op: op.to_string(), source })?;
        for phase in [Phase::Prefill, Phase::Decode] {
            match report.model(phase) {
                Some(m) => match phase {
                    Phase::Prefill => profile.prefill = Some(m),
                    Phase::Decode => profile.decode = Some(m),
                },
                None => warn!("operator `{op}` has no {phase} samples; fitted {} only", other(phase)),
            }
        }
        set.profiles.insert(op.to_string(), profile);
        reports.insert(op.to_string(), report);
    }
    set.validate()?;
    ensure_dir(&args.out)?;
    write_file(&args.out.join("profiles.json"), &to_json(&set))?;
    write_file(&args.out.join("fit_report.json"), &to_json(&reports))?;
    Ok(Outcome { all_feasible: true })
}

fn other(phase: Phase) -> Phase {
    match phase {
        Phase::Prefill => Phase::Decode,
        Phase::Decode => Phase::Prefill,
    }
}
