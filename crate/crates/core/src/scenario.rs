// SPDX-License-Identifier: Apache-2.0

//! End-to-end scenario runs: plan, place, and compare against the uniform
//! model-level baseline, for single points and parameter sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{
    brute_force_autoscale, greedy_autoscale, model_level_autoscale, unloaded_latency, AutoscaleError,
    AutoscaleParams, BruteForceBounds, ScalingPlan,
};
use crate::bundled;
use crate::metrics::{
    compare, evaluate_scenario, EnergyParams, MetricsError, ReportRow, SavingsReport, ScenarioMetrics,
};
use crate::opgraph::{GraphError, OperatorDag};
use crate::perfmodel::{Phase, PerfError, ProfileSet};
use crate::placement::{default_stream_place, place, Fleet, Placement, PlacementError, PlacementParams};
use crate::workload::{WorkloadError, WorkloadPoint};

pub const DEFAULT_B_MAX_PREFILL: u32 = 8;
pub const DEFAULT_B_MAX_DECODE: u32 = 128;
pub const DEFAULT_SLO_PREFILL: SloSpec = SloSpec::Multiple(2.5);
pub const DEFAULT_SLO_DECODE: SloSpec = SloSpec::Multiple(2.5);

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Autoscale(#[from] AutoscaleError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// A latency target: absolute seconds, or a multiple of the unloaded
/// iteration latency written as `3x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SloSpec {
    Seconds(f64),
    Multiple(f64),
}

impl FromStr for SloSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (num, multiple) = match s.strip_suffix(['x', 'X']) {
            Some(n) => (n, true),
            None => (s, false),
        };
        let v: f64 = num.trim().parse().map_err(|_| format!("`{s}` is neither seconds nor a multiple like `3x`"))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(format!("slo must be positive and finite, got `{s}`"));
        }
        Ok(if multiple { SloSpec::Multiple(v) } else { SloSpec::Seconds(v) })
    }
}

impl fmt::Display for SloSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SloSpec::Seconds(s) => write!(f, "{s}"),
            SloSpec::Multiple(k) => write!(f, "{k}x"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Operator,
    Model,
    Oracle,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "operator" => Ok(Mode::Operator),
            "model" => Ok(Mode::Model),
            "oracle" => Ok(Mode::Oracle),
            other => Err(format!("unknown mode `{other}` (operator | model | oracle)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Operator => "operator",
            Mode::Model => "model",
            Mode::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    Shared,
    DefaultStream,
}

impl FromStr for PlacementMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "shared" => Ok(PlacementMode::Shared),
            "default_stream" | "default-stream" => Ok(PlacementMode::DefaultStream),
            other => Err(format!("unknown placement `{other}` (shared | default_stream)")),
        }
    }
}

impl fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementMode::Shared => "shared",
            PlacementMode::DefaultStream => "default_stream",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Seqlen,
    Qps,
    ModelScale,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "seqlen" => Ok(SweepAxis::Seqlen),
            "qps" => Ok(SweepAxis::Qps),
            "model_scale" | "model-scale" => Ok(SweepAxis::ModelScale),
            other => Err(format!("unknown sweep axis `{other}` (seqlen | qps | model_scale)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Seqlen => "seqlen",
            SweepAxis::Qps => "qps",
            SweepAxis::ModelScale => "model_scale",
        })
    }
}

/// Parses `a,b,c` or `start:stop:step` (inclusive, additive) or
/// `start:stop:*factor` (geometric). Values accept `k`/`K` suffixes (×1024).
pub fn parse_range(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| -> Result<f64, String> {
        let t = t.trim();
        let (body, scale) = match t.strip_suffix(['k', 'K']) {
            Some(b) => (b, 1024.0),
            None => (t, 1.0),
        };
        body.trim().parse::<f64>().map(|v| v * scale).map_err(|_| format!("bad number `{t}` in range"))
    };
    let out = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("range `{s}` must be start:stop:step"));
        }
        let (start, stop) = (num(parts[0])?, num(parts[1])?);
        let mut v = Vec::new();
        if let Some(f) = parts[2].trim().strip_prefix('*') {
            let f = num(f)?;
            if f.is_nan() || f <= 1.0 || start.is_nan() || start <= 0.0 {
                return Err("geometric range needs start > 0 and factor > 1".into());
            }
            let mut x = start;
            while x <= stop * (1.0 + 1e-12) {
                v.push(x);
                x *= f;
            }
        } else {
            let step = num(parts[2])?;
            if step.is_nan() || step <= 0.0 {
                return Err("range step must be positive".into());
            }
            let mut k = 0.0;
            while start + k * step <= stop * (1.0 + 1e-12) {
                v.push(start + k * step);
                k += 1.0;
            }
        }
        v
    } else {
        s.split(',').filter(|t| !t.trim().is_empty()).map(num).collect::<Result<_, _>>()?
    };
    if out.is_empty() {
        return Err(format!("range `{s}` is empty"));
    }
    Ok(out)
}

/// Reads a DAG from a path, falling back to a bundled name.
pub fn resolve_dag(arg: &str) -> Result<OperatorDag, ScenarioError> {
    if Path::new(arg).exists() {
        return Ok(OperatorDag::load(Path::new(arg))?);
    }
    let text = bundled::dag(arg).ok_or_else(|| ScenarioError::Config(format!("--dag: no file or bundled graph `{arg}`")))?;
    Ok(OperatorDag::from_json(text)?)
}

pub fn resolve_profiles(arg: &str) -> Result<ProfileSet, ScenarioError> {
    if Path::new(arg).exists() {
        return Ok(ProfileSet::load(Path::new(arg))?);
    }
    let text = bundled::profiles(arg)
        .ok_or_else(|| ScenarioError::Config(format!("--profiles: no file or bundled profile set `{arg}`")))?;
    Ok(ProfileSet::from_json(text)?)
}

pub fn resolve_fleet(arg: &str) -> Result<Fleet, ScenarioError> {
    if Path::new(arg).exists() {
        return Ok(Fleet::load(Path::new(arg))?);
    }
    let text = bundled::fleet(arg).ok_or_else(|| ScenarioError::Config(format!("--fleet: no file or bundled fleet `{arg}`")))?;
    Ok(Fleet::from_json(text)?)
}

/// Everything needed to plan and place one model on one fleet.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dag: OperatorDag,
    pub profiles: ProfileSet,
    pub fleet: Fleet,
    pub slo_prefill: SloSpec,
    pub slo_decode: SloSpec,
    pub epsilon: f64,
    pub b_max_prefill: u32,
    pub b_max_decode: u32,
    pub parallelism: Vec<u32>,
    pub prune_pass: bool,
    pub bounds: BruteForceBounds,
    pub placement: PlacementParams,
    pub energy: EnergyParams,
}

/// Outcome of one workload point: candidate and baseline, planned and placed.
#[derive(Debug, Clone, Serialize)]
pub struct PointRun {
    pub point: WorkloadPoint,
    pub candidate_plan: ScalingPlan,
    pub candidate_placement: Placement,
    pub baseline_plan: ScalingPlan,
    pub baseline_placement: Placement,
    pub report: SavingsReport,
}

impl PointRun {
    pub fn feasible(&self) -> bool {
        self.candidate_plan.feasible && self.candidate_placement.feasible
    }
}

impl Scenario {
    pub fn new(dag: OperatorDag, profiles: ProfileSet, fleet: Fleet) -> Self {
        let placement = PlacementParams::with_interference(profiles.interference);
        Self {
            dag,
            profiles,
            fleet,
            slo_prefill: DEFAULT_SLO_PREFILL,
            slo_decode: DEFAULT_SLO_DECODE,
            epsilon: 0.0,
            b_max_prefill: DEFAULT_B_MAX_PREFILL,
            b_max_decode: DEFAULT_B_MAX_DECODE,
            parallelism: crate::autoscaler::DEFAULT_PARALLELISM.to_vec(),
            prune_pass: false,
            bounds: BruteForceBounds::default(),
            placement,
            energy: EnergyParams::default(),
        }
    }

    /// A bundled model (`dense-7b`, `moe-57b`) on the bundled default fleet.
    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        Ok(Self::new(resolve_dag(name)?, resolve_profiles(name)?, resolve_fleet("default")?))
    }

    fn mem_limit(&self) -> Option<f64> {
        self.fleet.devices().iter().map(|d| d.mem_cap).reduce(f64::max)
    }

    /// Resolved planning parameters for `point` on `dag`.
    pub fn params(&self, dag: &OperatorDag, point: &WorkloadPoint) -> Result<AutoscaleParams, ScenarioError> {
        let (spec, b_max) = match point.phase {
            Phase::Prefill => (self.slo_prefill, self.b_max_prefill),
            Phase::Decode => (self.slo_decode, self.b_max_decode),
        };
        let mut params = AutoscaleParams::new(1.0).with_b_max(b_max).with_parallelism(&self.parallelism);
        params.mem_limit = self.mem_limit();
        params.prune_pass = self.prune_pass;
        params.slo = match spec {
            SloSpec::Seconds(s) => s,
            SloSpec::Multiple(k) => k * unloaded_latency(dag, &self.profiles, point, &params)?,
        };
        params.epsilon = self.epsilon;
        params.validate()?;
        Ok(params)
    }

    pub fn plan(&self, dag: &OperatorDag, point: &WorkloadPoint, mode: Mode) -> Result<ScalingPlan, ScenarioError> {
        let params = self.params(dag, point)?;
        Ok(match mode {
            Mode::Operator => greedy_autoscale(dag, &self.profiles, point, &params)?,
            Mode::Model => model_level_autoscale(dag, &self.profiles, point, &params)?,
            Mode::Oracle => brute_force_autoscale(dag, &self.profiles, point, &params, &self.bounds)?,
        })
    }

    pub fn place(&self, dag: &OperatorDag, plan: &ScalingPlan, mode: PlacementMode) -> Result<Placement, ScenarioError> {
        Ok(match mode {
            PlacementMode::Shared => place(plan, dag, &self.profiles, &self.fleet, &self.placement)?,
            PlacementMode::DefaultStream => default_stream_place(plan, dag, &self.profiles, &self.fleet, &self.placement)?,
        })
    }

    /// Plans and places `point` in `mode`, and compares it against the
    /// model-level plan placed with [`place`].
    ///
    /// In operator mode the uniform plan competes with the greedy one and the
    /// better placed result is kept.
    pub fn run_point_on(
        &self,
        dag: &OperatorDag,
        point: &WorkloadPoint,
        mode: Mode,
        placement: PlacementMode,
    ) -> Result<PointRun, ScenarioError> {
        let label = mode.to_string();
        let baseline_plan = self.plan(dag, point, Mode::Model)?;
        let baseline_placement = self.place(dag, &baseline_plan, PlacementMode::Shared)?;
        let base = self.evaluate("model", dag, &baseline_plan, &baseline_placement)?;
        let (candidate_plan, candidate_placement, cand) = match mode {
            Mode::Model => {
                let placed = self.place(dag, &baseline_plan, placement)?;
                let m = self.evaluate(&label, dag, &baseline_plan, &placed)?;
                (baseline_plan.clone(), placed, m)
            }
            Mode::Oracle => {
                let plan = self.plan(dag, point, mode)?;
                let placed = self.place(dag, &plan, placement)?;
                let m = self.evaluate(&label, dag, &plan, &placed)?;
                (plan, placed, m)
            }
            Mode::Operator => {
                let plan = self.plan(dag, point, mode)?;
                let placed = self.place(dag, &plan, placement)?;
                let m = self.evaluate(&label, dag, &plan, &placed)?;
                // the uniform plan is itself an operator-level plan; keep it
                // when the per-operator one places no better
                let uniform = if placement == PlacementMode::Shared {
                    (baseline_placement.clone(), base.clone())
                } else {
                    let placed = self.place(dag, &baseline_plan, placement)?;
                    let m = self.evaluate(&label, dag, &baseline_plan, &placed)?;
                    (placed, m)
                };
                if self.prefer(&m, &uniform.1, placement) {
                    (plan, placed, m)
                } else {
                    let mut m = uniform.1;
                    m.label = label;
                    (baseline_plan.clone(), uniform.0, m)
                }
            }
        };
        let report = compare(&base, &cand)?;
        Ok(PointRun { point: *point, candidate_plan, candidate_placement, baseline_plan, baseline_placement, report })
    }

    fn evaluate(
        &self,
        label: &str,
        dag: &OperatorDag,
        plan: &ScalingPlan,
        placed: &Placement,
    ) -> Result<ScenarioMetrics, ScenarioError> {
        Ok(evaluate_scenario(label, plan, placed, dag, &self.profiles, &self.placement.interference, &self.energy)?)
    }

    /// Whether `a` beats `b`: feasibility first, then devices and energy under
    /// sharing, energy alone under the default stream.
    fn prefer(&self, a: &ScenarioMetrics, b: &ScenarioMetrics, mode: PlacementMode) -> bool {
        if a.feasible != b.feasible {
            return a.feasible;
        }
        match mode {
            PlacementMode::Shared => (a.devices, a.energy) <= (b.devices, b.energy),
            PlacementMode::DefaultStream => a.energy <= b.energy,
        }
    }

    pub fn run_point(&self, point: &WorkloadPoint, mode: Mode, placement: PlacementMode) -> Result<PointRun, ScenarioError> {
        self.run_point_on(&self.dag, point, mode, placement)
    }

    /// Runs every axis value around `base` concurrently; results come back in
    /// axis order.
    pub fn sweep(
        &self,
        axis: SweepAxis,
        values: &[f64],
        base: &WorkloadPoint,
        mode: Mode,
        placement: PlacementMode,
    ) -> Result<Vec<PointRun>, ScenarioError> {
        values
            .par_iter()
            .map(|&value| {
                let mut point = *base;
                match axis {
                    SweepAxis::Qps => {
                        if !(value >= 0.0 && value.is_finite()) {
                            return Err(ScenarioError::Config(format!("--range: qps must be >= 0, got {value}")));
                        }
                        point.qps = value;
                        self.run_point_on(&self.dag, &point, mode, placement)
                    }
                    SweepAxis::Seqlen => {
                        point.seq_len = whole(value, "seqlen")?;
                        self.run_point_on(&self.dag, &point, mode, placement)
                    }
                    SweepAxis::ModelScale => {
                        let dag = self.dag.scaled_layers(whole(value, "model_scale")?);
                        self.run_point_on(&dag, &point, mode, placement)
                    }
                }
            })
            .collect()
    }
}

fn whole(value: f64, what: &str) -> Result<u32, ScenarioError> {
    if value >= 1.0 && value.fract() == 0.0 && value <= f64::from(u32::MAX) {
        Ok(value as u32)
    } else {
        Err(ScenarioError::Config(format!("--range: {what} values must be positive integers, got {value}")))
    }
}

/// CSV rows for a sweep, in axis order.
pub fn sweep_rows(axis: SweepAxis, values: &[f64], runs: &[PointRun]) -> Vec<ReportRow> {
    let name = axis.to_string();
    values.iter().zip(runs).map(|(&v, run)| ReportRow::new(&name, v, &run.report)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slo_spec_parsing() {
        assert_eq!("0.5".parse::<SloSpec>().unwrap(), SloSpec::Seconds(0.5));
        assert_eq!("3x".parse::<SloSpec>().unwrap(), SloSpec::Multiple(3.0));
        assert_eq!(" 2.5X ".parse::<SloSpec>().unwrap(), SloSpec::Multiple(2.5));
        assert!("0".parse::<SloSpec>().is_err());
        assert!("-1x".parse::<SloSpec>().is_err());
        assert!("fast".parse::<SloSpec>().is_err());
        assert_eq!(SloSpec::Multiple(3.0).to_string(), "3x");
    }

    #[test]
    fn range_forms() {
        assert_eq!(parse_range("1,5,10").unwrap(), vec![1.0, 5.0, 10.0]);
        assert_eq!(parse_range("1k:4k:*2").unwrap(), vec![1024.0, 2048.0, 4096.0]);
        assert_eq!(parse_range("10:30:10").unwrap(), vec![10.0, 20.0, 30.0]);
        assert!(parse_range("").is_err());
        assert!(parse_range("1:2").is_err());
        assert!(parse_range("1:4:0").is_err());
        assert!(parse_range("0:4:*2").is_err());
    }

    #[test]
    fn enum_round_trips() {
        for m in [Mode::Operator, Mode::Model, Mode::Oracle] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        for p in [PlacementMode::Shared, PlacementMode::DefaultStream] {
            assert_eq!(p.to_string().parse::<PlacementMode>().unwrap(), p);
        }
        for a in [SweepAxis::Seqlen, SweepAxis::Qps, SweepAxis::ModelScale] {
            assert_eq!(a.to_string().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("fastest".parse::<Mode>().is_err());
    }

    #[test]
    fn multiple_slo_scales_unloaded_latency() {
        let s = Scenario::bundled("dense-7b").unwrap();
        let pt = WorkloadPoint::new(1.0, 1024, Phase::Prefill);
        let mut abs = s.clone();
        abs.slo_prefill = SloSpec::Multiple(1.0);
        let one = abs.params(&s.dag, &pt).unwrap().slo;
        abs.slo_prefill = SloSpec::Multiple(3.0);
        let three = abs.params(&s.dag, &pt).unwrap().slo;
        assert!((three / one - 3.0).abs() < 1e-12);
        abs.slo_prefill = SloSpec::Seconds(0.25);
        assert_eq!(abs.params(&s.dag, &pt).unwrap().slo, 0.25);
    }

    #[test]
    fn model_mode_compares_equal() {
        let s = Scenario::bundled("dense-7b").unwrap();
        let pt = WorkloadPoint::new(30.0, 2048, Phase::Prefill);
        let run = s.run_point(&pt, Mode::Model, PlacementMode::Shared).unwrap();
        assert_eq!(run.report.gpu_savings, 0.0);
        assert_eq!(run.report.energy_savings, 0.0);
        assert_eq!(run.report.memory_savings, 0.0);
    }

    #[test]
    fn oracle_on_large_graph_is_refused() {
        let s = Scenario::bundled("moe-57b").unwrap();
        let pt = WorkloadPoint::new(5.0, 1024, Phase::Prefill);
        let err = s.run_point(&pt, Mode::Oracle, PlacementMode::Shared).unwrap_err();
        assert!(matches!(err, ScenarioError::Autoscale(AutoscaleError::SearchSpaceTooLarge { .. })), "{err}");
    }

    #[test]
    fn bad_sweep_values_are_rejected() {
        let s = Scenario::bundled("dense-7b").unwrap();
        let pt = WorkloadPoint::new(5.0, 1024, Phase::Prefill);
        assert!(s.sweep(SweepAxis::Seqlen, &[1.5], &pt, Mode::Operator, PlacementMode::Shared).is_err());
        assert!(s.sweep(SweepAxis::ModelScale, &[0.0], &pt, Mode::Operator, PlacementMode::Shared).is_err());
        assert!(s.sweep(SweepAxis::Qps, &[-1.0], &pt, Mode::Operator, PlacementMode::Shared).is_err());
    }
}
