// SPDX-License-Identifier: Apache-2.0

//! Scaling planners: greedy operator-level autoscaling, the uniform
//! model-level baseline, and an exhaustive oracle for small graphs.
//!
//! All planners share one [`Evaluator`], which turns a per-operator
//! configuration into queueing waits, sojourn times and the critical-path
//! iteration latency. Plans are always re-evaluated from scratch before they
//! are returned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opgraph::{arrival_rate, GraphError, OperatorDag};
use crate::perfmodel::{comm_time, op_memory, OperatorProfile, PerfError, Phase, ProfileSet};
use crate::queueing::{expected_wait, min_replicas_stable, QueueOperatingPoint};
use crate::workload::WorkloadPoint;

pub const DEFAULT_R_CAP: u32 = 512;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;
pub const DEFAULT_B_MAX: u32 = 8;
pub const DEFAULT_PARALLELISM: [u32; 4] = [1, 2, 4, 8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutoscaleError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("operator `{op}` has no stable configuration within the replica cap")]
    NoStableConfig { op: String },
    #[error("search space too large: {projected:.3e} candidate plans exceed the limit of {limit:.3e}")]
    SearchSpaceTooLarge { projected: f64, limit: f64 },
    #[error("no configuration within bounds meets the SLO")]
    InfeasibleSlo,
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Decision variables for one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperatorConfig {
    #[serde(rename = "P")]
    pub parallelism: u32,
    #[serde(rename = "R")]
    pub replicas: u32,
    #[serde(rename = "B")]
    pub batch: u32,
    /// MPS share in percent.
    pub sm_share: u32,
}

impl OperatorConfig {
    pub fn new(parallelism: u32, replicas: u32, batch: u32) -> Self {
        Self { parallelism, replicas, batch, sm_share: 100 }
    }

    /// GPU units: `P·R`.
    pub fn cost(&self) -> u64 {
        u64::from(self.parallelism) * u64::from(self.replicas)
    }

    fn lex_key(&self) -> (u32, u32, u32) {
        (self.parallelism, self.replicas, self.batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoscaleParams {
    /// TTFT for prefill plans, TBT for decode plans (seconds).
    pub slo: f64,
    pub epsilon: f64,
    pub b_max: u32,
    #[serde(default)]
    pub b_max_overrides: BTreeMap<String, u32>,
    /// Allowed parallelism degrees. Each operator's baseline is the smallest
    /// degree whose shard fits `mem_limit`.
    pub parallelism: Vec<u32>,
    pub max_iterations: usize,
    pub r_cap: u32,
    /// Post-pass that sheds replicas from any operator, not just the bottleneck.
    #[serde(default)]
    pub prune_pass: bool,
    /// Configurations whose per-shard memory exceeds this many bytes are skipped.
    #[serde(default)]
    pub mem_limit: Option<f64>,
}

impl AutoscaleParams {
    pub fn new(slo: f64) -> Self {
        Self {
            slo,
            epsilon: 0.0,
            b_max: DEFAULT_B_MAX,
            b_max_overrides: BTreeMap::new(),
            parallelism: DEFAULT_PARALLELISM.to_vec(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            r_cap: DEFAULT_R_CAP,
            prune_pass: false,
            mem_limit: None,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_b_max(mut self, b_max: u32) -> Self {
        self.b_max = b_max;
        self
    }

    pub fn with_parallelism(mut self, set: &[u32]) -> Self {
        self.parallelism = set.to_vec();
        self
    }

    pub fn validate(&self) -> Result<(), AutoscaleError> {
        let bad = |m: String| Err(AutoscaleError::InvalidParams(m));
        if !(self.slo > 0.0 && self.slo.is_finite()) {
            return bad(format!("slo must be positive and finite, got {}", self.slo));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < self.slo) {
            return bad(format!("epsilon must lie in [0, slo), got {}", self.epsilon));
        }
        if self.b_max == 0 || self.b_max_overrides.values().any(|&b| b == 0) {
            return bad("b_max must be >= 1".into());
        }
        if self.parallelism.is_empty() || self.parallelism.contains(&0) {
            return bad("parallelism set must be non-empty and positive".into());
        }
        if self.r_cap == 0 {
            return bad("r_cap must be >= 1".into());
        }
        if self.mem_limit.is_some_and(|m| m.is_nan() || m <= 0.0) {
            return bad("mem_limit must be positive".into());
        }
        Ok(())
    }

    pub fn b_max_for(&self, op: &str) -> u32 {
        self.b_max_overrides.get(op).copied().unwrap_or(self.b_max)
    }

    pub fn parallelism_set(&self) -> Vec<u32> {
        let mut s = self.parallelism.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Predicted behaviour of one operator under its configuration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeEval {
    /// Per-layer batch latency T_v.
    pub latency: f64,
    /// Whole-node batch service time `layer_count · T_v`.
    pub service: f64,
    /// Queueing wait W_v.
    pub wait: f64,
    /// Outgoing transfer time C_v.
    pub comm: f64,
    /// `W_v + layer_count · T_v`.
    pub sojourn: f64,
    /// Critical-path weight `W_v + layer_count · (T_v + C_v)`.
    pub weight: f64,
    pub arrival: f64,
    pub service_rate: f64,
    /// Per-replica busy fraction `λ / (R·μ)`.
    pub utilization: f64,
}

struct NodeCtx<'a> {
    profile: &'a OperatorProfile,
    layers: f64,
    volumes: Vec<&'a OperatorProfile>,
}

/// Evaluates operator configurations for one DAG, profile set and workload point.
pub struct Evaluator<'a> {
    dag: &'a OperatorDag,
    point: WorkloadPoint,
    bandwidth: f64,
    nodes: Vec<NodeCtx<'a>>,
    mem_limit: Option<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(dag: &'a OperatorDag, profiles: &'a ProfileSet, point: &WorkloadPoint) -> Result<Self, AutoscaleError> {
        if !(point.qps >= 0.0 && point.qps.is_finite()) {
            return Err(AutoscaleError::InvalidParams(format!("qps must be >= 0, got {}", point.qps)));
        }
        if point.seq_len == 0 {
            return Err(AutoscaleError::InvalidParams("seq_len must be >= 1".into()));
        }
        let mut nodes = Vec::with_capacity(dag.len());
        for (i, n) in dag.nodes().iter().enumerate() {
            let profile = profiles.get(&n.profile_ref)?;
            if profile.phase_model(point.phase).is_none() {
                return Err(PerfError::UnknownPhase { profile: n.profile_ref.clone(), phase: point.phase }.into());
            }
            let volumes = dag
                .out_edges(i)
                .filter_map(|e| e.volume_ref.as_deref())
                .map(|r| profiles.get(r))
                .collect::<Result<Vec<_>, _>>()?;
            nodes.push(NodeCtx { profile, layers: f64::from(n.layer_count), volumes });
        }
        Ok(Self { dag, point: *point, bandwidth: profiles.link_bandwidth, nodes, mem_limit: None })
    }

    pub fn with_mem_limit(mut self, limit: Option<f64>) -> Self {
        self.mem_limit = limit;
        self
    }

    pub fn dag(&self) -> &OperatorDag {
        self.dag
    }

    /// Per-shard memory of operator `v` under `cfg`.
    pub fn shard_memory(&self, v: usize, cfg: &OperatorConfig) -> f64 {
        op_memory(self.nodes[v].profile, cfg.batch, self.point.seq_len, cfg.parallelism)
    }

    /// [`Evaluator::node`] restricted to configurations within the memory limit.
    pub fn candidate(&self, v: usize, cfg: &OperatorConfig) -> Option<NodeEval> {
        if self.mem_limit.is_some_and(|m| self.shard_memory(v, cfg) > m) {
            return None;
        }
        self.node(v, cfg)
    }

    pub fn point(&self) -> &WorkloadPoint {
        &self.point
    }

    pub fn profile(&self, v: usize) -> &OperatorProfile {
        self.nodes[v].profile
    }

    /// Per-layer batch latency at full SM share.
    pub fn latency(&self, v: usize, cfg: &OperatorConfig) -> f64 {
        let ctx = &self.nodes[v];
        let model = ctx.profile.phase_model(self.point.phase).expect("phase checked at construction");
        let base = model.eval(cfg.batch, self.point.seq_len) / (ctx.profile.eta * f64::from(cfg.parallelism));
        let share = f64::from(cfg.sm_share.clamp(1, 100)) / 100.0;
        base * ctx.profile.sm_slowdown(share, cfg.batch, self.point.seq_len)
    }

    pub fn comm(&self, v: usize, batch: u32) -> f64 {
        self.nodes[v]
            .volumes
            .iter()
            .map(|p| comm_time(p, batch, self.point.seq_len, self.bandwidth))
            .fold(0.0, f64::max)
    }

    /// Full evaluation with an extra latency multiplier (interference).
    /// `None` when the queue would be unstable.
    pub fn node_with_factor(&self, v: usize, cfg: &OperatorConfig, factor: f64) -> Option<NodeEval> {
        let layers = self.nodes[v].layers;
        let latency = self.latency(v, cfg) * factor;
        let service = layers * latency;
        let mu = 1.0 / service;
        let lambda = arrival_rate(self.point.qps, cfg.batch);
        let wait = if lambda > 0.0 {
            expected_wait(&QueueOperatingPoint::new(lambda, mu, cfg.replicas)).ok()?
        } else {
            0.0
        };
        let comm = self.comm(v, cfg.batch);
        Some(NodeEval {
            latency,
            service,
            wait,
            comm,
            sojourn: wait + service,
            weight: wait + layers * (latency + comm),
            arrival: lambda,
            service_rate: mu,
            utilization: lambda / (f64::from(cfg.replicas) * mu),
        })
    }

    pub fn node(&self, v: usize, cfg: &OperatorConfig) -> Option<NodeEval> {
        self.node_with_factor(v, cfg, 1.0)
    }

    pub fn min_stable_replicas(&self, v: usize, batch: u32, parallelism: u32) -> u32 {
        let lambda = arrival_rate(self.point.qps, batch);
        if lambda <= 0.0 {
            return 1;
        }
        let cfg = OperatorConfig::new(parallelism, 1, batch);
        let mu = 1.0 / (self.nodes[v].layers * self.latency(v, &cfg));
        min_replicas_stable(lambda, mu)
    }

    /// Iteration latency from per-node evaluations.
    pub fn total(&self, evals: &[NodeEval]) -> f64 {
        let w: Vec<f64> = evals.iter().map(|e| e.weight).collect();
        self.dag.longest_path_len(&w)
    }

    pub fn evaluate(&self, configs: &[OperatorConfig]) -> Option<Vec<NodeEval>> {
        configs.iter().enumerate().map(|(v, c)| self.node(v, c)).collect()
    }

    /// Builds a plan by re-evaluating `configs` from scratch.
    pub fn plan(&self, configs: &[OperatorConfig], slo: f64, trace: Vec<MoveRecord>) -> ScalingPlan {
        let evals: Option<Vec<NodeEval>> = self.evaluate(configs);
        let (latency, path, predicted, stable) = match &evals {
            Some(ev) => {
                let w: Vec<f64> = ev.iter().map(|e| e.weight).collect();
                let (len, path) = self.dag.longest_path(&w);
                (len, path, ev.clone(), true)
            }
            None => (f64::INFINITY, Vec::new(), vec![NodeEval::default(); configs.len()], false),
        };
        let ids = self.dag.nodes().iter().map(|n| n.id.clone());
        ScalingPlan {
            phase: self.point.phase,
            point: self.point,
            slo,
            configs: ids.clone().zip(configs.iter().copied()).collect(),
            predicted: ids.zip(predicted).collect(),
            iteration_latency: latency,
            critical_path: path.into_iter().map(|i| self.dag.node(i).id.clone()).collect(),
            objective: configs.iter().map(OperatorConfig::cost).sum(),
            feasible: stable && latency <= slo,
            trace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveKind {
    Upscale,
    Downscale,
    Prune,
}

/// One accepted planner move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub step: usize,
    pub kind: MoveKind,
    pub operator: String,
    pub from: OperatorConfig,
    pub to: OperatorConfig,
    pub latency_before: f64,
    pub latency_after: f64,
    pub objective_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub phase: Phase,
    pub point: WorkloadPoint,
    pub slo: f64,
    #[serde(rename = "operators")]
    pub configs: BTreeMap<String, OperatorConfig>,
    pub predicted: BTreeMap<String, NodeEval>,
    pub iteration_latency: f64,
    pub critical_path: Vec<String>,
    pub objective: u64,
    pub feasible: bool,
    pub trace: Vec<MoveRecord>,
}

impl ScalingPlan {
    /// Configurations in DAG node order.
    pub fn config_vec(&self, dag: &OperatorDag) -> Vec<OperatorConfig> {
        dag.nodes().iter().map(|n| self.configs[&n.id]).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Smallest allowed parallelism whose unbatched shard fits the memory limit.
fn base_parallelism(ev: &Evaluator<'_>, v: usize, params: &AutoscaleParams) -> u32 {
    let set = params.parallelism_set();
    set.iter()
        .copied()
        .find(|&p| ev.mem_limit.is_none_or(|m| ev.shard_memory(v, &OperatorConfig::new(p, 1, 1)) <= m))
        .unwrap_or(set[0])
}

/// Queue-free iteration latency with every operator at `B = 1`, `R = 1` and
/// its baseline parallelism.
pub fn unloaded_latency(
    dag: &OperatorDag,
    profiles: &ProfileSet,
    point: &WorkloadPoint,
    params: &AutoscaleParams,
) -> Result<f64, AutoscaleError> {
    let ev = Evaluator::new(dag, profiles, point)?.with_mem_limit(params.mem_limit);
    let w: Vec<f64> = (0..dag.len())
        .map(|v| {
            let cfg = OperatorConfig::new(base_parallelism(&ev, v, params), 1, 1);
            ev.nodes[v].layers * (ev.latency(v, &cfg) + ev.comm(v, 1))
        })
        .collect();
    Ok(dag.longest_path_len(&w))
}

fn init_vec(ev: &Evaluator<'_>, params: &AutoscaleParams) -> Result<Vec<OperatorConfig>, AutoscaleError> {
    ev.dag()
        .nodes()
        .iter()
        .enumerate()
        .map(|(v, node)| {
            let p = base_parallelism(ev, v, params);
            let mut best: Option<(f64, OperatorConfig)> = None;
            for b in 1..=params.b_max_for(&node.id) {
                let r = ev.min_stable_replicas(v, b, p);
                if r > params.r_cap {
                    continue;
                }
                let cfg = OperatorConfig::new(p, r, b);
                let Some(e) = ev.candidate(v, &cfg) else { continue };
                if best.as_ref().is_none_or(|(s, _)| e.sojourn < *s) {
                    best = Some((e.sojourn, cfg));
                }
            }
            best.map(|(_, c)| c).ok_or_else(|| AutoscaleError::NoStableConfig { op: node.id.clone() })
        })
        .collect()
}

/// Per-operator seed configuration: baseline parallelism, and the batch size
/// minimizing sojourn at the smallest stable replica count.
pub fn init_configs(
    dag: &OperatorDag,
    profiles: &ProfileSet,
    point: &WorkloadPoint,
    params: &AutoscaleParams,
) -> Result<BTreeMap<String, OperatorConfig>, AutoscaleError> {
    params.validate()?;
    let ev = Evaluator::new(dag, profiles, point)?.with_mem_limit(params.mem_limit);
    let v = init_vec(&ev, params)?;
    Ok(dag.nodes().iter().map(|n| n.id.clone()).zip(v).collect())
}

struct State<'e, 'a> {
    ev: &'e Evaluator<'a>,
    configs: Vec<OperatorConfig>,
    evals: Vec<NodeEval>,
    latency: f64,
    objective: u64,
}

impl<'e, 'a> State<'e, 'a> {
    fn new(ev: &'e Evaluator<'a>, configs: Vec<OperatorConfig>) -> Option<Self> {
        let evals = ev.evaluate(&configs)?;
        let latency = ev.total(&evals);
        let objective = configs.iter().map(OperatorConfig::cost).sum();
        Some(Self { ev, configs, evals, latency, objective })
    }

    /// Critical-path operator with the largest sojourn; ties go to the smallest id.
    fn bottleneck(&self) -> usize {
        let w: Vec<f64> = self.evals.iter().map(|e| e.weight).collect();
        let (_, path) = self.ev.dag().longest_path(&w);
        let dag = self.ev.dag();
        *path
            .iter()
            .max_by(|&&a, &&b| {
                self.evals[a]
                    .sojourn
                    .total_cmp(&self.evals[b].sojourn)
                    .then_with(|| dag.node(b).id.cmp(&dag.node(a).id))
            })
            .expect("critical path is non-empty")
    }

    /// Latency and node evaluation if operator `v` switched to `cfg`.
    fn try_config(&self, v: usize, cfg: &OperatorConfig) -> Option<(f64, NodeEval)> {
        let e = self.ev.candidate(v, cfg)?;
        let mut w: Vec<f64> = self.evals.iter().map(|e| e.weight).collect();
        w[v] = e.weight;
        Some((self.ev.dag().longest_path_len(&w), e))
    }

    fn apply(&mut self, v: usize, cfg: OperatorConfig, e: NodeEval, latency: f64) {
        self.objective = self.objective - self.configs[v].cost() + cfg.cost();
        self.configs[v] = cfg;
        self.evals[v] = e;
        self.latency = latency;
    }
}

struct Candidate {
    cfg: OperatorConfig,
    eval: NodeEval,
    latency: f64,
    objective: u64,
}

/// Greedy operator-level autoscaling.
///
/// Starting from [`init_configs`], repeatedly upscales the critical-path
/// bottleneck while the iteration latency exceeds the SLO and downscales it
/// while the latency sits more than `epsilon` below. The same descent is also
/// run from the model-level plan, and the cheaper feasible result is kept.
/// Infeasible SLOs yield a plan with `feasible == false`.
pub fn greedy_autoscale(
    dag: &OperatorDag,
    profiles: &ProfileSet,
    point: &WorkloadPoint,
    params: &AutoscaleParams,
) -> Result<ScalingPlan, AutoscaleError> {
    params.validate()?;
    let ev = Evaluator::new(dag, profiles, point)?.with_mem_limit(params.mem_limit);
    let init = init_vec(&ev, params)?;
    let mut st = State::new(&ev, init).expect("initial configs are stable");
    let mut trace = Vec::new();
    descend(&mut st, params, &mut trace);

    // A second descent from the uniform plan keeps the result no worse than it.
    let uniform = model_level_autoscale(dag, profiles, point, params)?;
    if uniform.feasible && !(st.latency <= params.slo && st.objective <= uniform.objective) {
        let mut alt = State::new(&ev, uniform.config_vec(dag)).expect("feasible plan is stable");
        let mut alt_trace = Vec::new();
        descend(&mut alt, params, &mut alt_trace);
        st = alt;
        trace = alt_trace;
    }
    Ok(ev.plan(&st.configs, params.slo, trace))
}

fn descend(st: &mut State<'_, '_>, params: &AutoscaleParams, trace: &mut Vec<MoveRecord>) {
    let dag = st.ev.dag();
    let pset = params.parallelism_set();
    let slo = params.slo;
    for step in 0..params.max_iterations {
        let j = st.bottleneck();
        let cur = st.configs[j];
        let b_max = params.b_max_for(&dag.node(j).id);
        let before = st.latency;

        let chosen = if st.latency <= slo - params.epsilon {
            if cur.replicas <= 1 {
                break;
            }
            let mut best: Option<Candidate> = None;
            for b in cur.batch..=b_max {
                for &p in &pset {
                    let cfg = OperatorConfig { parallelism: p, replicas: cur.replicas - 1, batch: b, ..cur };
                    let Some((lat, eval)) = st.try_config(j, &cfg) else { continue };
                    let objective = st.objective - cur.cost() + cfg.cost();
                    if lat > slo || objective >= st.objective {
                        continue;
                    }
                    let better = match &best {
                        None => true,
                        Some(c) => (objective, lat) < (c.objective, c.latency),
                    };
                    if better {
                        best = Some(Candidate { cfg, eval, latency: lat, objective });
                    }
                }
            }
            best.map(|c| (MoveKind::Downscale, c))
        } else if st.latency > slo {
            if cur.replicas >= params.r_cap {
                break;
            }
            let mut cands = Vec::new();
            for b in 1..=b_max {
                for &p in &pset {
                    let cfg = OperatorConfig { parallelism: p, replicas: cur.replicas + 1, batch: b, ..cur };
                    let Some((lat, eval)) = st.try_config(j, &cfg) else { continue };
                    if lat < st.latency {
                        let objective = st.objective - cur.cost() + cfg.cost();
                        cands.push(Candidate { cfg, eval, latency: lat, objective });
                    }
                }
            }
            // Cheapest move that reaches the SLO if one exists, otherwise the
            // largest latency reduction. Candidates are in (b, p) order, so
            // min_by keeps the first on full ties.
            let reaching = cands.iter().any(|c| c.latency <= slo);
            let pick = if reaching {
                cands
                    .into_iter()
                    .filter(|c| c.latency <= slo)
                    .min_by(|a, b| a.objective.cmp(&b.objective).then(a.latency.total_cmp(&b.latency)))
            } else {
                cands
                    .into_iter()
                    .min_by(|a, b| a.latency.total_cmp(&b.latency).then(a.objective.cmp(&b.objective)))
            };
            pick.map(|c| (MoveKind::Upscale, c))
        } else {
            break;
        };

        let Some((kind, c)) = chosen else { break };
        st.apply(j, c.cfg, c.eval, c.latency);
        trace.push(MoveRecord {
            step,
            kind,
            operator: dag.node(j).id.clone(),
            from: cur,
            to: c.cfg,
            latency_before: before,
            latency_after: c.latency,
            objective_after: st.objective,
        });
    }

    if params.prune_pass && st.latency <= slo {
        prune_pass(st, slo, trace);
    }
}

/// Sheds single replicas from any operator while the plan stays within the SLO.
fn prune_pass(st: &mut State<'_, '_>, slo: f64, trace: &mut Vec<MoveRecord>) {
    let dag = st.ev.dag();
    let mut order: Vec<usize> = (0..dag.len()).collect();
    order.sort_by(|a, b| dag.node(*a).id.cmp(&dag.node(*b).id));
    let mut progress = true;
    while progress {
        progress = false;
        for &v in &order {
            let cur = st.configs[v];
            if cur.replicas <= 1 {
                continue;
            }
            let cfg = OperatorConfig { replicas: cur.replicas - 1, ..cur };
            if let Some((lat, eval)) = st.try_config(v, &cfg) {
                if lat <= slo {
                    let before = st.latency;
                    st.apply(v, cfg, eval, lat);
                    trace.push(MoveRecord {
                        step: trace.len(),
                        kind: MoveKind::Prune,
                        operator: dag.node(v).id.clone(),
                        from: cur,
                        to: cfg,
                        latency_before: before,
                        latency_after: lat,
                        objective_after: st.objective,
                    });
                    progress = true;
                }
            }
        }
    }
}

/// Uniform baseline: every operator shares one `(B, R)`, each at its baseline parallelism.
pub fn model_level_autoscale(
    dag: &OperatorDag,
    profiles: &ProfileSet,
    point: &WorkloadPoint,
    params: &AutoscaleParams,
) -> Result<ScalingPlan, AutoscaleError> {
    params.validate()?;
    let ev = Evaluator::new(dag, profiles, point)?.with_mem_limit(params.mem_limit);
    let b_limit = dag.nodes().iter().map(|n| params.b_max_for(&n.id)).min().unwrap_or(1);
    let n = dag.len();
    let ps: Vec<u32> = (0..n).map(|v| base_parallelism(&ev, v, params)).collect();
    let p_sum: u64 = ps.iter().map(|&p| u64::from(p)).sum();
    let uniform = |r: u32, b: u32| -> Vec<OperatorConfig> { ps.iter().map(|&p| OperatorConfig::new(p, r, b)).collect() };

    // (objective, latency, batch, replicas)
    let mut feasible: Option<(u64, f64, u32, u32)> = None;
    let mut fallback: Option<(f64, u64, u32, u32)> = None;
    for b in 1..=b_limit {
        let r_min = (0..n).map(|v| ev.min_stable_replicas(v, b, ps[v])).max().unwrap_or(1);
        if r_min > params.r_cap {
            continue;
        }
        let mut prev = f64::INFINITY;
        for r in r_min..=params.r_cap {
            let cfgs = uniform(r, b);
            let evals: Option<Vec<NodeEval>> = (0..n).map(|v| ev.candidate(v, &cfgs[v])).collect();
            let Some(evals) = evals else { break };
            let lat = ev.total(&evals);
            let obj = p_sum * u64::from(r);
            if lat <= params.slo {
                if feasible.is_none_or(|f| (obj, lat) < (f.0, f.1)) {
                    feasible = Some((obj, lat, b, r));
                }
                break;
            }
            if fallback.is_none_or(|f| (lat, obj) < (f.0, f.1)) {
                fallback = Some((lat, obj, b, r));
            }
            // stop once added replicas no longer buy latency
            if prev - lat <= 1e-12 * lat {
                break;
            }
            prev = lat;
        }
    }
    let (b, r) = match (feasible, fallback) {
        (Some(f), _) => (f.2, f.3),
        (None, Some(f)) => (f.2, f.3),
        (None, None) => {
            return Err(AutoscaleError::NoStableConfig {
                op: dag.node(0).id.clone(),
            })
        }
    };
    Ok(ev.plan(&uniform(r, b), params.slo, Vec::new()))
}

/// Bounds for the exhaustive oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceBounds {
    pub r_max: u32,
    pub max_operators: usize,
    /// Limit on the number of plans left to enumerate after per-operator
    /// dominance pruning.
    pub max_combinations: f64,
}

impl Default for BruteForceBounds {
    fn default() -> Self {
        Self { r_max: 8, max_operators: 6, max_combinations: 1e7 }
    }
}

#[derive(Clone, Copy)]
struct OracleOption {
    cfg: OperatorConfig,
    weight: f64,
    cost: u64,
}

/// Exhaustive search over `(P, R, B)` per operator for the cheapest
/// SLO-feasible plan. Ties go to the lexicographically smallest
/// `(P, R, B)` vector in node order.
///
/// Per-operator options dominated in both cost and critical-path weight are
/// dropped before enumeration; this preserves the optimum because iteration
/// latency is monotone in every node weight.
pub fn brute_force_autoscale(
    dag: &OperatorDag,
    profiles: &ProfileSet,
    point: &WorkloadPoint,
    params: &AutoscaleParams,
    bounds: &BruteForceBounds,
) -> Result<ScalingPlan, AutoscaleError> {
    params.validate()?;
    let pset = params.parallelism_set();
    if dag.len() > bounds.max_operators {
        // unpruned size of the grid
        let projected = dag
            .nodes()
            .iter()
            .map(|n| (pset.len() as f64) * f64::from(bounds.r_max) * f64::from(params.b_max_for(&n.id)))
            .product();
        return Err(AutoscaleError::SearchSpaceTooLarge { projected, limit: bounds.max_combinations });
    }
    let ev = Evaluator::new(dag, profiles, point)?.with_mem_limit(params.mem_limit);

    let mut options: Vec<Vec<OracleOption>> = Vec::with_capacity(dag.len());
    for (v, node) in dag.nodes().iter().enumerate() {
        let mut all = Vec::new();
        for &p in &pset {
            for r in 1..=bounds.r_max {
                for b in 1..=params.b_max_for(&node.id) {
                    let cfg = OperatorConfig::new(p, r, b);
                    if let Some(e) = ev.candidate(v, &cfg) {
                        all.push(OracleOption { cfg, weight: e.weight, cost: cfg.cost() });
                    }
                }
            }
        }
        all.sort_by(|a, b| {
            a.cost
                .cmp(&b.cost)
                .then(a.weight.total_cmp(&b.weight))
                .then(a.cfg.lex_key().cmp(&b.cfg.lex_key()))
        });
        let mut kept: Vec<OracleOption> = Vec::new();
        for o in all {
            let dominated = kept.iter().any(|k| {
                k.weight <= o.weight && (k.cost < o.cost || k.cfg.lex_key() < o.cfg.lex_key())
            });
            if !dominated {
                kept.push(o);
            }
        }
        if kept.is_empty() {
            return Err(AutoscaleError::InfeasibleSlo);
        }
        options.push(kept);
    }
    let projected: f64 = options.iter().map(|o| o.len() as f64).product();
    if projected > bounds.max_combinations {
        return Err(AutoscaleError::SearchSpaceTooLarge { projected, limit: bounds.max_combinations });
    }

    let n = dag.len();
    // suffix minima for cost and weight bounds
    let min_cost: Vec<u64> = options.iter().map(|o| o.iter().map(|x| x.cost).min().unwrap()).collect();
    let min_weight: Vec<f64> = options
        .iter()
        .map(|o| o.iter().map(|x| x.weight).fold(f64::INFINITY, f64::min))
        .collect();
    let mut rest_cost = vec![0u64; n + 1];
    for v in (0..n).rev() {
        rest_cost[v] = rest_cost[v + 1] + min_cost[v];
    }

    type Incumbent = (u64, Vec<(u32, u32, u32)>, Vec<OperatorConfig>);

    struct Search<'s> {
        dag: &'s OperatorDag,
        options: &'s [Vec<OracleOption>],
        min_weight: &'s [f64],
        rest_cost: &'s [u64],
        slo: f64,
        weights: Vec<f64>,
        chosen: Vec<usize>,
        best: Option<Incumbent>,
    }

    impl Search<'_> {
        fn run(&mut self, v: usize, cost: u64) {
            let n = self.options.len();
            if let Some((best_cost, _, _)) = &self.best {
                if cost + self.rest_cost[v] > *best_cost {
                    return;
                }
            }
            if v == n {
                if self.dag.longest_path_len(&self.weights) > self.slo {
                    return;
                }
                let cfgs: Vec<OperatorConfig> =
                    (0..n).map(|u| self.options[u][self.chosen[u]].cfg).collect();
                let key: Vec<(u32, u32, u32)> = cfgs.iter().map(|c| c.lex_key()).collect();
                let better = match &self.best {
                    None => true,
                    Some((bc, bk, _)) => cost < *bc || (cost == *bc && key < *bk),
                };
                if better {
                    self.best = Some((cost, key, cfgs));
                }
                return;
            }
            // latency lower bound with every remaining node at its lightest option
            for u in v..n {
                self.weights[u] = self.min_weight[u];
            }
            if self.dag.longest_path_len(&self.weights) > self.slo {
                return;
            }
            for i in 0..self.options[v].len() {
                let o = self.options[v][i];
                self.weights[v] = o.weight;
                for u in v + 1..n {
                    self.weights[u] = self.min_weight[u];
                }
                self.chosen[v] = i;
                self.run(v + 1, cost + o.cost);
            }
        }
    }

    let mut search = Search {
        dag,
        options: &options,
        min_weight: &min_weight,
        rest_cost: &rest_cost,
        slo: params.slo,
        weights: min_weight.clone(),
        chosen: vec![0; n],
        best: None,
    };
    search.run(0, 0);
    match search.best {
        Some((_, _, cfgs)) => Ok(ev.plan(&cfgs, params.slo, Vec::new())),
        None => Err(AutoscaleError::InfeasibleSlo),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opgraph::{build_dag, DagSpec, EdgeSpec, OperatorNode};
    use crate::perfmodel::{LatencyModel, OperatorKind};

    pub(crate) fn chain(ops: &[(&str, LatencyModel)]) -> (OperatorDag, ProfileSet) {
        let nodes = ops
            .iter()
            .map(|(id, _)| OperatorNode {
                id: id.to_string(),
                kind: OperatorKind::Linear,
                layer_count: 1,
                profile_ref: id.to_string(),
            })
            .collect();
        let edges = ops
            .windows(2)
            .map(|w| EdgeSpec { src: w[0].0.into(), dst: w[1].0.into(), volume_ref: None })
            .collect();
        let dag = build_dag(&DagSpec { nodes, edges }).unwrap();
        let profiles = ProfileSet::new(
            ops.iter()
                .map(|(id, m)| {
                    (
                        id.to_string(),
                        OperatorProfile {
                            kind: OperatorKind::Linear,
                            prefill: Some(*m),
                            decode: Some(*m),
                            eta: 1.0,
                            ..Default::default()
                        },
                    )
                })
                .collect(),
        );
        (dag, profiles)
    }

    fn point(qps: f64) -> WorkloadPoint {
        WorkloadPoint::new(qps, 1, Phase::Prefill)
    }

    #[test]
    fn flat_latency_prefers_largest_batch() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.1, 0.0, 0.0))]);
        let params = AutoscaleParams::new(10.0).with_b_max(6);
        let cfg = init_configs(&dag, &prof, &point(8.0), &params).unwrap();
        // scan oracle: sojourn per b at min stable R, computed independently
        let mut best = (f64::INFINITY, 0);
        for b in 1..=6u32 {
            let lam = 8.0 / f64::from(b);
            let mu = 10.0;
            let r = (1..).find(|&r| lam < f64::from(r) * mu).unwrap();
            let w = expected_wait(&QueueOperatingPoint::new(lam, mu, r)).unwrap();
            if w + 0.1 < best.0 {
                best = (w + 0.1, b);
            }
        }
        assert_eq!(best.1, 6);
        assert_eq!(cfg["a"].batch, 6);
    }

    #[test]
    fn idle_load_gets_minimal_config() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(1e-3, 1e-4, 0.0)), ("b", LatencyModel::new(2e-3, 1e-5, 0.0))]);
        let params = AutoscaleParams::new(1.0);
        let cfg = init_configs(&dag, &prof, &point(1e-9), &params).unwrap();
        for c in cfg.values() {
            assert_eq!((c.replicas, c.batch, c.parallelism), (1, 1, 1));
        }
    }

    #[test]
    fn identical_ops_identical_configs() {
        let m = LatencyModel::new(1e-2, 1e-3, 0.0);
        let (dag, prof) = chain(&[("a", m), ("b", m)]);
        let cfg = init_configs(&dag, &prof, &point(1000.0), &AutoscaleParams::new(1.0)).unwrap();
        assert_eq!(cfg["a"], cfg["b"]);
        assert!(cfg["a"].replicas > 1);
    }

    #[test]
    fn no_stable_config_under_tiny_cap() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(1.0, 0.0, 0.0))]);
        let mut params = AutoscaleParams::new(10.0).with_b_max(1);
        params.r_cap = 2;
        assert_eq!(
            init_configs(&dag, &prof, &point(5.0), &params).unwrap_err(),
            AutoscaleError::NoStableConfig { op: "a".into() }
        );
    }

    #[test]
    fn impossible_slo_marks_plan_infeasible() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.01, 0.0, 0.0)), ("b", LatencyModel::new(0.02, 0.0, 0.0))]);
        // one parallelism degree, so compute time has a hard floor of 0.03 s
        let params = AutoscaleParams::new(0.02).with_parallelism(&[1]);
        let plan = greedy_autoscale(&dag, &prof, &point(10.0), &params).unwrap();
        assert!(!plan.feasible);
        assert!(plan.iteration_latency > 0.02);
        let model = model_level_autoscale(&dag, &prof, &point(10.0), &params).unwrap();
        assert!(!model.feasible);
    }

    #[test]
    fn generous_slo_matches_oracle() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.01, 0.0, 0.0)), ("b", LatencyModel::new(0.005, 0.0, 0.0))]);
        let params = AutoscaleParams::new(100.0).with_parallelism(&[1, 2]).with_b_max(4);
        let pt = point(30.0);
        let g = greedy_autoscale(&dag, &prof, &pt, &params).unwrap();
        let o = brute_force_autoscale(&dag, &prof, &pt, &params, &BruteForceBounds::default()).unwrap();
        assert!(g.feasible && o.feasible);
        assert_eq!(g.objective, o.objective);
    }

    #[test]
    fn tight_slo_scales_only_the_slow_operator() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.1, 0.0, 0.0)), ("b", LatencyModel::new(0.01, 0.0, 0.0))]);
        let params = AutoscaleParams::new(0.2).with_parallelism(&[1]).with_b_max(1);
        let pt = point(8.0);
        let init = init_configs(&dag, &prof, &pt, &params).unwrap();
        let g = greedy_autoscale(&dag, &prof, &pt, &params).unwrap();
        assert!(g.feasible);
        assert!(g.configs["a"].replicas > init["a"].replicas);
        assert_eq!(g.configs["b"], init["b"]);
        let o = brute_force_autoscale(&dag, &prof, &pt, &params, &BruteForceBounds { r_max: 16, ..Default::default() })
            .unwrap();
        assert_eq!(o.configs["b"].replicas, 1);
        assert_eq!(g.objective, o.objective);
        assert!(g.trace.iter().all(|m| m.operator == "a"));
    }

    #[test]
    fn single_operator_oracle_matches_queue_solution() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.05, 0.0, 0.0))]);
        let params = AutoscaleParams::new(0.06).with_parallelism(&[1]).with_b_max(1);
        let pt = point(40.0);
        let o = brute_force_autoscale(&dag, &prof, &pt, &params, &BruteForceBounds::default()).unwrap();
        // need W <= 0.01 at mu = 20
        let r = crate::queueing::min_replicas_for_wait(40.0, 20.0, 0.06 - 0.05);
        assert_eq!(o.configs["a"].replicas, r);
    }

    #[test]
    fn oracle_search_space_guard() {
        let ops: Vec<(String, LatencyModel)> =
            (0..6).map(|i| (format!("op{i}"), LatencyModel::new(1e-3 * (i + 1) as f64, 0.0, 0.0))).collect();
        let refs: Vec<(&str, LatencyModel)> = ops.iter().map(|(s, m)| (s.as_str(), *m)).collect();
        let (dag, prof) = chain(&refs);
        let params = AutoscaleParams::new(10.0).with_b_max(64);
        let bounds = BruteForceBounds { r_max: 64, ..Default::default() };
        assert!(matches!(
            brute_force_autoscale(&dag, &prof, &point(200.0), &params, &bounds),
            Err(AutoscaleError::SearchSpaceTooLarge { .. })
        ));
        let small = BruteForceBounds { max_operators: 3, ..Default::default() };
        assert!(matches!(
            brute_force_autoscale(&dag, &prof, &point(1.0), &params, &small),
            Err(AutoscaleError::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn uniform_dag_greedy_no_worse_than_model_level() {
        let m = LatencyModel::new(0.02, 0.0, 0.0);
        let (dag, prof) = chain(&[("a", m), ("b", m), ("c", m)]);
        let params = AutoscaleParams::new(0.09).with_parallelism(&[1]).with_b_max(1);
        let pt = point(60.0);
        let g = greedy_autoscale(&dag, &prof, &pt, &params).unwrap();
        let ml = model_level_autoscale(&dag, &prof, &pt, &params).unwrap();
        let o = brute_force_autoscale(&dag, &prof, &pt, &params, &BruteForceBounds::default()).unwrap();
        assert!(g.feasible && ml.feasible);
        assert!(o.objective <= g.objective && g.objective <= ml.objective);
    }

    #[test]
    fn model_level_idle_is_one_instance() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.01, 0.0, 0.0)), ("b", LatencyModel::new(0.03, 0.0, 0.0))]);
        let plan = model_level_autoscale(&dag, &prof, &point(1e-6), &AutoscaleParams::new(1.0)).unwrap();
        assert!(plan.configs.values().all(|c| c.replicas == 1));
    }

    #[test]
    fn rejects_bad_params() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.01, 0.0, 0.0))]);
        assert!(matches!(
            greedy_autoscale(&dag, &prof, &point(1.0), &AutoscaleParams::new(0.0)),
            Err(AutoscaleError::InvalidParams(_))
        ));
        assert!(matches!(
            greedy_autoscale(&dag, &prof, &point(1.0), &AutoscaleParams::new(1.0).with_epsilon(1.0)),
            Err(AutoscaleError::InvalidParams(_))
        ));
    }

    #[test]
    fn prune_pass_never_raises_objective() {
        let (dag, prof) = chain(&[("a", LatencyModel::new(0.04, 0.0, 0.0)), ("b", LatencyModel::new(0.03, 0.0, 0.0))]);
        let mut params = AutoscaleParams::new(0.12).with_parallelism(&[1]).with_b_max(2);
        let pt = point(60.0);
        let plain = greedy_autoscale(&dag, &prof, &pt, &params).unwrap();
        params.prune_pass = true;
        let pruned = greedy_autoscale(&dag, &prof, &pt, &params).unwrap();
        assert!(pruned.objective <= plain.objective);
        assert!(pruned.feasible);
    }
}
