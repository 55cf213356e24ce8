// SPDX-License-Identifier: Apache-2.0

//! Replica-to-device placement.
//!
//! [`place`] deploys `min_v R_v` full model instances on dedicated device
//! groups, then colocates the remaining replicas wherever memory, SM share
//! and the interference-adjusted SLO allow, provisioning fresh devices only
//! when nothing fits. [`default_stream_place`] is the no-sharing variant in
//! which every extra replica gets devices of its own.
//!
//! A replica with parallelism `P` is split into `P` shards that must sit on
//! distinct devices. A shard occupies its device's SMs by `ρ_v·d_v` on
//! average, the replica utilization times the profile's SM demand, and a
//! device's load is the sum over its shards. Devices hosting extra replicas
//! slow every tenant by the interference factor of that load.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{AutoscaleError, Evaluator, NodeEval, OperatorConfig, ScalingPlan};
use crate::opgraph::OperatorDag;
use crate::perfmodel::{interference_factor, op_memory, InterferenceParams, ProfileSet};

pub const DEFAULT_DEVICE_MEMORY: f64 = 80e9;
pub const DEFAULT_SM_CAP: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("fleet exhausted: all {fleet} devices are in use")]
    FleetExhausted { fleet: usize },
    #[error("shard of `{op}` needs {need} bytes but device {device} holds only {cap}")]
    InfeasiblePlacement { op: String, need: f64, device: u32, cap: f64 },
    #[error("plan does not match the graph: {0}")]
    PlanMismatch(String),
    #[error("invalid fleet: {0}")]
    InvalidFleet(String),
    #[error(transparent)]
    Autoscale(#[from] AutoscaleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: u32,
    pub mem_cap: f64,
    #[serde(default = "one")]
    pub compute_cap: f64,
    #[serde(default = "default_link_bw")]
    pub link_bw: f64,
}

fn one() -> f64 {
    1.0
}

fn default_link_bw() -> f64 {
    crate::perfmodel::DEFAULT_LINK_BANDWIDTH
}

impl DeviceSpec {
    pub fn new(id: u32, mem_cap: f64) -> Self {
        Self { id, mem_cap, compute_cap: 1.0, link_bw: default_link_bw() }
    }
}

/// Devices available for placement, kept in ascending id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fleet {
    devices: Vec<DeviceSpec>,
}

impl Fleet {
    pub fn new(mut devices: Vec<DeviceSpec>) -> Result<Self, PlacementError> {
        if devices.is_empty() {
            return Err(PlacementError::InvalidFleet("fleet is empty".into()));
        }
        devices.sort_by_key(|d| d.id);
        for w in devices.windows(2) {
            if w[0].id == w[1].id {
                return Err(PlacementError::InvalidFleet(format!("duplicate device id {}", w[0].id)));
            }
        }
        for d in &devices {
            if !(d.mem_cap > 0.0 && d.mem_cap.is_finite()) {
                return Err(PlacementError::InvalidFleet(format!("device {} has mem_cap {}", d.id, d.mem_cap)));
            }
            if d.compute_cap != 1.0 {
                return Err(PlacementError::InvalidFleet(format!("device {} compute_cap must be 1.0", d.id)));
            }
        }
        Ok(Self { devices })
    }

    pub fn homogeneous(count: u32, mem_cap: f64) -> Self {
        Self::new((0..count).map(|i| DeviceSpec::new(i, mem_cap)).collect()).expect("valid homogeneous fleet")
    }

    pub fn from_json(text: &str) -> Result<Self, PlacementError> {
        let devices: Vec<DeviceSpec> =
            serde_json::from_str(text).map_err(|e| PlacementError::InvalidFleet(e.to_string()))?;
        Self::new(devices)
    }

    pub fn load(path: &Path) -> Result<Self, PlacementError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlacementError::InvalidFleet(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.devices
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementParams {
    pub mem_weight: f64,
    pub compute_weight: f64,
    /// Upper bound on the SM load of a device receiving an extra replica.
    pub sm_cap: f64,
    pub interference: InterferenceParams,
}

impl Default for PlacementParams {
    fn default() -> Self {
        Self {
            mem_weight: 0.5,
            compute_weight: 0.5,
            sm_cap: DEFAULT_SM_CAP,
            interference: InterferenceParams::default(),
        }
    }
}

impl PlacementParams {
    pub fn with_interference(interference: InterferenceParams) -> Self {
        Self { interference, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaAssignment {
    pub operator: String,
    pub replica: u32,
    pub shard: u32,
    pub device: u32,
    /// Part of a base model instance rather than an extra replica.
    pub base: bool,
    /// MPS share in percent.
    pub sm_share: u32,
    pub mem: f64,
    /// Per-layer batch latency of this replica including interference.
    pub interference_adjusted_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLoad {
    pub id: u32,
    pub mem_used: f64,
    pub mem_cap: f64,
    /// Time-averaged SM load `Σ ρ·d` of the hosted shards.
    pub sm_demand: f64,
    pub interference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub assignments: Vec<ReplicaAssignment>,
    pub devices: Vec<DeviceLoad>,
    pub devices_used: usize,
    pub iteration_latency: f64,
    pub feasible: bool,
}

impl Placement {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("placement serializes")
    }

    pub fn device(&self, id: u32) -> Option<&DeviceLoad> {
        self.devices.iter().find(|d| d.id == id)
    }
}

/// `w_m·(mem slack / mem_cap) + w_c·(compute slack / compute_cap)`, clamped to `[0, 1]`.
pub fn weighted_slack(device: &DeviceSpec, mem_used: f64, sm_demand: f64, params: &PlacementParams) -> f64 {
    let mem = ((device.mem_cap - mem_used) / device.mem_cap).clamp(0.0, 1.0);
    let compute = ((device.compute_cap - sm_demand) / device.compute_cap).clamp(0.0, 1.0);
    (params.mem_weight * mem + params.compute_weight * compute).clamp(0.0, 1.0)
}

/// Per-operator shard facts shared by every replica.
struct OpInfo {
    cfg: OperatorConfig,
    mem: f64,
    demand: f64,
    load: f64,
    latency: f64,
}

struct Slot {
    spec: usize,
    mem_used: f64,
    load: f64,
    hosts_extra: bool,
}

struct Work<'f> {
    fleet: &'f Fleet,
    ops: Vec<OpInfo>,
    slots: Vec<Slot>,
    used: BTreeSet<usize>,
    /// `replica_slots[v][r]`: slots holding shards of replica `r` of `v`.
    replica_slots: Vec<Vec<Vec<usize>>>,
    assignments: Vec<(usize, u32, u32, usize, bool)>,
}

impl<'f> Work<'f> {
    fn provision(&mut self) -> Result<usize, PlacementError> {
        let spec = (0..self.fleet.len())
            .find(|i| !self.used.contains(i))
            .ok_or(PlacementError::FleetExhausted { fleet: self.fleet.len() })?;
        self.used.insert(spec);
        self.slots.push(Slot { spec, mem_used: 0.0, load: 0.0, hosts_extra: false });
        Ok(self.slots.len() - 1)
    }

    fn cap(&self, slot: usize) -> &DeviceSpec {
        &self.fleet.devices()[self.slots[slot].spec]
    }

    fn fits_empty(&self, slot: usize, v: usize, dag: &OperatorDag) -> Result<(), PlacementError> {
        let d = self.cap(slot);
        if self.ops[v].mem > d.mem_cap {
            return Err(PlacementError::InfeasiblePlacement {
                op: dag.node(v).id.clone(),
                need: self.ops[v].mem,
                device: d.id,
                cap: d.mem_cap,
            });
        }
        Ok(())
    }

    fn put(&mut self, v: usize, r: u32, shard: u32, slot: usize, base: bool) {
        let op = &self.ops[v];
        let s = &mut self.slots[slot];
        s.mem_used += op.mem;
        s.load += op.load;
        s.hosts_extra |= !base;
        self.replica_slots[v][r as usize].push(slot);
        self.assignments.push((v, r, shard, slot, base));
    }

    fn slot_factor(&self, slot: usize, params: &InterferenceParams) -> f64 {
        let s = &self.slots[slot];
        if s.hosts_extra {
            interference_factor(s.load, 0.0, params)
        } else {
            1.0
        }
    }

    fn replica_factor(&self, v: usize, r: usize, params: &InterferenceParams) -> f64 {
        self.replica_slots[v][r]
            .iter()
            .map(|&s| self.slot_factor(s, params))
            .fold(1.0, f64::max)
    }

    fn op_factors(&self, params: &InterferenceParams) -> Vec<f64> {
        (0..self.ops.len())
            .map(|v| {
                let reps = &self.replica_slots[v];
                let sum: f64 = (0..reps.len()).map(|r| self.replica_factor(v, r, params)).sum();
                sum / reps.len() as f64
            })
            .collect()
    }
}

fn latency_with_factors(ev: &Evaluator<'_>, configs: &[OperatorConfig], factors: &[f64]) -> Option<(f64, Vec<NodeEval>)> {
    let evals: Option<Vec<NodeEval>> = configs
        .iter()
        .enumerate()
        .map(|(v, c)| ev.node_with_factor(v, c, factors[v]))
        .collect();
    let evals = evals?;
    Some((ev.total(&evals), evals))
}

/// Per-operator evaluations under the interference implied by `placement`.
pub fn adjusted_evals(
    ev: &Evaluator<'_>,
    plan: &ScalingPlan,
    placement: &Placement,
    params: &InterferenceParams,
) -> Option<Vec<NodeEval>> {
    let dag = ev.dag();
    let configs = plan.config_vec(dag);
    let factors = operator_factors(dag, &configs, placement, params);
    latency_with_factors(ev, &configs, &factors).map(|(_, e)| e)
}

fn operator_factors(
    dag: &OperatorDag,
    configs: &[OperatorConfig],
    placement: &Placement,
    params: &InterferenceParams,
) -> Vec<f64> {
    let dev_factor: BTreeMap<u32, f64> = placement
        .devices
        .iter()
        .map(|d| {
            let extra = placement.assignments.iter().any(|a| a.device == d.id && !a.base);
            (d.id, if extra { interference_factor(d.sm_demand, 0.0, params) } else { 1.0 })
        })
        .collect();
    let mut rep: BTreeMap<(&str, u32), f64> = BTreeMap::new();
    for a in &placement.assignments {
        let f = dev_factor.get(&a.device).copied().unwrap_or(1.0);
        let e = rep.entry((a.operator.as_str(), a.replica)).or_insert(1.0);
        *e = e.max(f);
    }
    dag.nodes()
        .iter()
        .zip(configs)
        .map(|(n, c)| {
            let sum: f64 = (0..c.replicas).map(|r| rep.get(&(n.id.as_str(), r)).copied().unwrap_or(1.0)).sum();
            sum / f64::from(c.replicas)
        })
        .collect()
}

/// Iteration latency of `plan` with every operator slowed by the mean
/// interference factor over its replicas. `INFINITY` if interference makes
/// any queue unstable.
pub fn recompute_latency_with_interference(
    ev: &Evaluator<'_>,
    plan: &ScalingPlan,
    placement: &Placement,
    params: &InterferenceParams,
) -> f64 {
    let dag = ev.dag();
    let configs = plan.config_vec(dag);
    let factors = operator_factors(dag, &configs, placement, params);
    latency_with_factors(ev, &configs, &factors).map_or(f64::INFINITY, |(t, _)| t)
}

fn setup<'f>(ev: &Evaluator<'_>, plan: &ScalingPlan, fleet: &'f Fleet) -> Result<(Vec<OperatorConfig>, Work<'f>), PlacementError> {
    let dag = ev.dag();
    if plan.configs.len() != dag.len() || dag.nodes().iter().any(|n| !plan.configs.contains_key(&n.id)) {
        return Err(PlacementError::PlanMismatch("operator sets differ".into()));
    }
    let configs = plan.config_vec(dag);
    let point = ev.point();
    let ops = configs
        .iter()
        .enumerate()
        .map(|(v, c)| {
            let prof = ev.profile(v);
            let rho = ev.node(v, c).map_or(1.0, |e| e.utilization.min(1.0));
            let demand = prof.sm_demand(c.batch, point.seq_len);
            OpInfo {
                cfg: *c,
                mem: op_memory(prof, c.batch, point.seq_len, c.parallelism),
                demand,
                load: rho * demand,
                latency: ev.latency(v, c),
            }
        })
        .collect();
    let work = Work {
        fleet,
        ops,
        slots: Vec::new(),
        used: BTreeSet::new(),
        replica_slots: configs.iter().map(|c| vec![Vec::new(); c.replicas as usize]).collect(),
        assignments: Vec::new(),
    };
    Ok((configs, work))
}

/// Packs `k` full model instances, each on its own device group, by
/// first-fit-decreasing on shard memory. A device takes a shard only while
/// both its memory and its time-averaged SM load stay within capacity.
fn deploy_base(work: &mut Work<'_>, dag: &OperatorDag, k: u32) -> Result<(), PlacementError> {
    let mut shards: Vec<(usize, u32)> = (0..work.ops.len())
        .flat_map(|v| (0..work.ops[v].cfg.parallelism).map(move |s| (v, s)))
        .collect();
    shards.sort_by(|a, b| {
        work.ops[b.0]
            .mem
            .total_cmp(&work.ops[a.0].mem)
            .then_with(|| dag.node(a.0).id.cmp(&dag.node(b.0).id))
            .then(a.1.cmp(&b.1))
    });
    for r in 0..k {
        let mut group: Vec<usize> = Vec::new();
        for &(v, s) in &shards {
            let holder = &work.replica_slots[v][r as usize];
            let fit = group.iter().copied().find(|&slot| {
                let (s, cap) = (&work.slots[slot], work.cap(slot));
                !holder.contains(&slot)
                    && s.mem_used + work.ops[v].mem <= cap.mem_cap
                    && s.load + work.ops[v].load <= cap.compute_cap
            });
            let slot = match fit {
                Some(slot) => slot,
                None => {
                    let slot = work.provision()?;
                    work.fits_empty(slot, v, dag)?;
                    group.push(slot);
                    slot
                }
            };
            work.put(v, r, s, slot, true);
        }
    }
    Ok(())
}

/// Extra replicas in placement order: descending latency, then id, then index.
fn extras(work: &Work<'_>, dag: &OperatorDag, k: u32) -> Vec<(usize, u32)> {
    let mut out: Vec<(usize, u32)> = (0..work.ops.len())
        .flat_map(|v| (k..work.ops[v].cfg.replicas).map(move |r| (v, r)))
        .collect();
    out.sort_by(|a, b| {
        let ta = work.ops[a.0].latency * f64::from(dag.node(a.0).layer_count);
        let tb = work.ops[b.0].latency * f64::from(dag.node(b.0).layer_count);
        tb.total_cmp(&ta)
            .then_with(|| dag.node(a.0).id.cmp(&dag.node(b.0).id))
            .then(a.1.cmp(&b.1))
    });
    out
}

fn finish(ev: &Evaluator<'_>, plan: &ScalingPlan, configs: &[OperatorConfig], work: Work<'_>, params: &PlacementParams) -> Placement {
    let dag = ev.dag();
    let factors = work.op_factors(&params.interference);
    let latency = latency_with_factors(ev, configs, &factors).map_or(f64::INFINITY, |(t, _)| t);
    let mut assignments: Vec<ReplicaAssignment> = work
        .assignments
        .iter()
        .map(|&(v, r, shard, slot, base)| {
            let op = &work.ops[v];
            ReplicaAssignment {
                operator: dag.node(v).id.clone(),
                replica: r,
                shard,
                device: work.cap(slot).id,
                base,
                sm_share: if base { 100 } else { share_percent(op.demand) },
                mem: op.mem,
                interference_adjusted_latency: op.latency * work.replica_factor(v, r as usize, &params.interference),
            }
        })
        .collect();
    assignments.sort_by(|a, b| (&a.operator, a.replica, a.shard).cmp(&(&b.operator, b.replica, b.shard)));
    let mut devices: Vec<DeviceLoad> = (0..work.slots.len())
        .map(|slot| {
            let s = &work.slots[slot];
            let spec = work.cap(slot);
            DeviceLoad {
                id: spec.id,
                mem_used: s.mem_used,
                mem_cap: spec.mem_cap,
                sm_demand: s.load,
                interference: work.slot_factor(slot, &params.interference),
            }
        })
        .collect();
    devices.sort_by_key(|d| d.id);
    Placement {
        devices_used: devices.len(),
        assignments,
        devices,
        iteration_latency: latency,
        feasible: plan.feasible && latency <= plan.slo,
    }
}

fn share_percent(demand: f64) -> u32 {
    ((100.0 * demand).ceil() as u32).clamp(1, 100)
}

/// Interference-aware greedy placement.
///
/// Infeasible plans are still placed; the result carries `feasible == false`
/// and colocation is then only accepted when it does not push latency above
/// the plan's own.
pub fn place(
    plan: &ScalingPlan,
    dag: &OperatorDag,
    profiles: &ProfileSet,
    fleet: &Fleet,
    params: &PlacementParams,
) -> Result<Placement, PlacementError> {
    let ev = Evaluator::new(dag, profiles, &plan.point)?;
    let (configs, mut work) = setup(&ev, plan, fleet)?;
    let k = configs.iter().map(|c| c.replicas).min().unwrap_or(0);
    deploy_base(&mut work, dag, k)?;

    let limit = plan.slo.max(plan.iteration_latency);
    for (v, r) in extras(&work, dag, k) {
        for shard in 0..work.ops[v].cfg.parallelism {
            let mut best: Option<(f64, usize)> = None;
            for slot in 0..work.slots.len() {
                if work.replica_slots[v][r as usize].contains(&slot) {
                    continue;
                }
                let (mem, load) = (work.ops[v].mem, work.ops[v].load);
                let s = &work.slots[slot];
                let cap = work.cap(slot);
                if s.mem_used + mem > cap.mem_cap || s.load + load > params.sm_cap {
                    continue;
                }
                let score = weighted_slack(cap, s.mem_used + mem, s.load + load, params);
                if best.is_some_and(|(b, bslot)| score < b || (score == b && cap.id > work.cap(bslot).id)) {
                    continue;
                }
                // tentative assignment, then SLO check
                let saved = (s.mem_used, s.load, s.hosts_extra);
                work.put(v, r, shard, slot, false);
                let factors = work.op_factors(&params.interference);
                let ok = latency_with_factors(&ev, &configs, &factors).is_some_and(|(t, _)| t <= limit);
                undo(&mut work, v, r, slot, saved);
                if ok {
                    best = Some((score, slot));
                }
            }
            let slot = match best {
                Some((_, slot)) => slot,
                None => {
                    let slot = work.provision()?;
                    work.fits_empty(slot, v, dag)?;
                    slot
                }
            };
            work.put(v, r, shard, slot, false);
        }
    }
    Ok(finish(&ev, plan, &configs, work, params))
}

fn undo(work: &mut Work<'_>, v: usize, r: u32, slot: usize, saved: (f64, f64, bool)) {
    let s = &mut work.slots[slot];
    (s.mem_used, s.load, s.hosts_extra) = saved;
    work.replica_slots[v][r as usize].pop();
    work.assignments.pop();
}

/// No-sharing placement: base instances as in [`place`], and every extra
/// replica shard on a freshly provisioned device.
pub fn default_stream_place(
    plan: &ScalingPlan,
    dag: &OperatorDag,
    profiles: &ProfileSet,
    fleet: &Fleet,
    params: &PlacementParams,
) -> Result<Placement, PlacementError> {
    let ev = Evaluator::new(dag, profiles, &plan.point)?;
    let (configs, mut work) = setup(&ev, plan, fleet)?;
    let k = configs.iter().map(|c| c.replicas).min().unwrap_or(0);
    deploy_base(&mut work, dag, k)?;
    for (v, r) in extras(&work, dag, k) {
        for shard in 0..work.ops[v].cfg.parallelism {
            let slot = work.provision()?;
            work.fits_empty(slot, v, dag)?;
            work.put(v, r, shard, slot, false);
        }
    }
    Ok(finish(&ev, plan, &configs, work, params))
}
