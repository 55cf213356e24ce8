// SPDX-License-Identifier: Apache-2.0

//! Random small planning instances shared by the integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use opscale::autoscaler::{unloaded_latency, AutoscaleParams};
use opscale::opgraph::{build_dag, DagSpec, EdgeSpec, OperatorDag, OperatorNode};
use opscale::perfmodel::{InterferenceParams, LatencyModel, OperatorKind, OperatorProfile, Phase, ProfileSet};
use opscale::workload::WorkloadPoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub dag: OperatorDag,
    pub profiles: ProfileSet,
    pub point: WorkloadPoint,
    pub params: AutoscaleParams,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn profile<R: Rng>(rng: &mut R, kind: OperatorKind) -> OperatorProfile {
    let c0 = rng.random_range(2e-5..5e-4);
    let c1 = rng.random_range(2e-8..4e-7);
    let c2 = if kind.has_quadratic_term() { rng.random_range(1e-11..2e-10) } else { 0.0 };
    OperatorProfile {
        kind,
        prefill: Some(LatencyModel::new(c0, c1, c2)),
        decode: Some(LatencyModel::new(c0 * 0.5, c1 * 4.0, 0.0)),
        weight_mem: rng.random_range(1e8..4e9),
        m0: 0.0,
        m1: rng.random_range(1e3..1e5),
        v0: 0.0,
        v1: rng.random_range(1e3..2e4),
        s0: rng.random_range(0.05..0.6),
        s1: rng.random_range(1e-6..2e-4),
        eta: rng.random_range(0.7..1.0),
        sm_table: None,
    }
}

/// A random DAG of `1..=max_ops` operators: a spanning chain-or-branch
/// structure plus an occasional extra edge.
pub fn random_dag<R: Rng>(rng: &mut R, max_ops: usize) -> (OperatorDag, ProfileSet) {
    let n = rng.random_range(1..=max_ops);
    let kinds = [OperatorKind::Attention, OperatorKind::Linear, OperatorKind::Norm, OperatorKind::Activation];
    let mut nodes = Vec::new();
    let mut profiles = BTreeMap::new();
    for i in 0..n {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let id = format!("op{i}");
        profiles.insert(id.clone(), profile(rng, kind));
        nodes.push(OperatorNode { id: id.clone(), kind, layer_count: rng.random_range(1..=4), profile_ref: id });
    }
    let mut edges = Vec::new();
    for i in 1..n {
        let src = rng.random_range(0..i);
        edges.push(EdgeSpec { src: format!("op{src}"), dst: format!("op{i}"), volume_ref: None });
        if i >= 2 && rng.random_bool(0.3) {
            let other = rng.random_range(0..i);
            if other != src {
                edges.push(EdgeSpec { src: format!("op{other}"), dst: format!("op{i}"), volume_ref: None });
            }
        }
    }
    let dag = build_dag(&DagSpec { nodes, edges }).expect("forward edges form a DAG");
    let mut set = ProfileSet::new(profiles);
    set.interference = InterferenceParams { theta: rng.random_range(0.0..1.0), exponent: 1.0 };
    (dag, set)
}

/// Small instance within the oracle's reach: `P ∈ {1, 2}`, `B_max ≤ 8`,
/// `R ≤ 8`, prefill phase.
pub fn small_instance<R: Rng>(rng: &mut R, max_ops: usize) -> Instance {
    let (dag, profiles) = random_dag(rng, max_ops);
    let qps = 10f64.powf(rng.random_range(1.0..3.5));
    let point = WorkloadPoint::new(qps, rng.random_range(64..=2048), Phase::Prefill);
    let mut params = AutoscaleParams::new(1.0).with_b_max(rng.random_range(1..=8)).with_parallelism(&[1, 2]);
    params.r_cap = 8;
    let base = unloaded_latency(&dag, &profiles, &point, &params).expect("unloaded latency is finite");
    params.slo = base * rng.random_range(1.2..4.0);
    Instance { dag, profiles, point, params }
}
