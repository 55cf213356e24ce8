// SPDX-License-Identifier: Apache-2.0

//! Operator DAG: construction, validation, arrival propagation and
//! critical-path iteration latency.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perfmodel::OperatorKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("cycle detected through edge {src} -> {dst}")]
    CycleDetected { src: String, dst: String },
    #[error("edge {src} -> {dst} names missing node `{missing}`")]
    DanglingEdge { src: String, dst: String, missing: String },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("node `{0}` has layer_count 0")]
    InvalidLayerCount(String),
    #[error("graph has no nodes")]
    Empty,
    #[error("no sojourn entry for node `{0}`")]
    MissingSojourn(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("failed to read DAG: {0}")]
    Io(String),
    #[error("failed to parse DAG: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    #[serde(default)]
    pub kind: OperatorKind,
    #[serde(default = "one")]
    pub layer_count: u32,
    pub profile_ref: String,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_ref: Option<String>,
}

/// On-disk graph description.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DagSpec {
    pub nodes: Vec<OperatorNode>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

impl DagSpec {
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))
    }
}

/// Validated operator graph. Node indices follow the order of the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDag {
    nodes: Vec<OperatorNode>,
    edges: Vec<EdgeSpec>,
    index: HashMap<String, usize>,
    succ: Vec<Vec<usize>>,
    /// Outgoing edge indices per node.
    out_edges: Vec<Vec<usize>>,
    topo: Vec<usize>,
    sources: Vec<usize>,
    sinks: Vec<usize>,
}

/// Per-node timing entering the critical path: `(sojourn + comm) · layer_count`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeTimes {
    pub sojourn: f64,
    pub comm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SojournMap {
    pub entries: BTreeMap<String, NodeTimes>,
}

impl SojournMap {
    pub fn insert(&mut self, id: impl Into<String>, sojourn: f64, comm: f64) {
        self.entries.insert(id.into(), NodeTimes { sojourn, comm });
    }
}

impl<S: Into<String>> FromIterator<(S, f64, f64)> for SojournMap {
    fn from_iter<I: IntoIterator<Item = (S, f64, f64)>>(iter: I) -> Self {
        let mut m = SojournMap::default();
        for (id, s, c) in iter {
            m.insert(id, s, c);
        }
        m
    }
}

pub fn build_dag(spec: &DagSpec) -> Result<OperatorDag, GraphError> {
    if spec.nodes.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut index = HashMap::with_capacity(spec.nodes.len());
    for (i, n) in spec.nodes.iter().enumerate() {
        if n.layer_count == 0 {
            return Err(GraphError::InvalidLayerCount(n.id.clone()));
        }
        if index.insert(n.id.clone(), i).is_some() {
            return Err(GraphError::DuplicateNode(n.id.clone()));
        }
    }
    let n = spec.nodes.len();
    let mut succ = vec![Vec::new(); n];
    let mut out_edges = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (ei, e) in spec.edges.iter().enumerate() {
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| GraphError::DanglingEdge {
                src: e.src.clone(),
                dst: e.dst.clone(),
                missing: id.to_string(),
            })
        };
        let s = lookup(&e.src)?;
        let d = lookup(&e.dst)?;
        if !succ[s].contains(&d) {
            succ[s].push(d);
            indeg[d] += 1;
        }
        out_edges[s].push(ei);
    }
    for list in &mut succ {
        list.sort_by(|a, b| spec.nodes[*a].id.cmp(&spec.nodes[*b].id));
    }

    // Kahn's algorithm, smallest id first for a deterministic order.
    let mut ready: BTreeSet<(&str, usize)> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(|i| (spec.nodes[i].id.as_str(), i))
        .collect();
    let mut remaining = indeg.clone();
    let mut topo = Vec::with_capacity(n);
    while let Some(&first) = ready.iter().next() {
        ready.remove(&first);
        let v = first.1;
        topo.push(v);
        for &w in &succ[v] {
            remaining[w] -= 1;
            if remaining[w] == 0 {
                ready.insert((spec.nodes[w].id.as_str(), w));
            }
        }
    }
    if topo.len() != n {
        let (src, dst) = find_back_edge(&spec.nodes, &succ);
        return Err(GraphError::CycleDetected { src, dst });
    }

    let sources = topo.iter().copied().filter(|&i| indeg[i] == 0).collect();
    let sinks = topo.iter().copied().filter(|&i| succ[i].is_empty()).collect();
    Ok(OperatorDag {
        nodes: spec.nodes.clone(),
        edges: spec.edges.clone(),
        index,
        succ,
        out_edges,
        topo,
        sources,
        sinks,
    })
}

fn find_back_edge(nodes: &[OperatorNode], succ: &[Vec<usize>]) -> (String, String) {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; nodes.len()];
    for root in 0..nodes.len() {
        if color[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        color[root] = 1;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < succ[v].len() {
                let w = succ[v][*next];
                *next += 1;
                match color[w] {
                    0 => {
                        color[w] = 1;
                        stack.push((w, 0));
                    }
                    1 => return (nodes[v].id.clone(), nodes[w].id.clone()),
                    _ => {}
                }
            } else {
                color[v] = 2;
                stack.pop();
            }
        }
    }
    unreachable!("Kahn's algorithm reported a cycle that DFS could not find")
}

impl OperatorDag {
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        build_dag(&DagSpec::from_json(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_spec(&self) -> DagSpec {
        DagSpec { nodes: self.nodes.clone(), edges: self.edges.clone() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[OperatorNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &OperatorNode {
        &self.nodes[i]
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.succ[i]
    }

    /// Outgoing edges of node `i`.
    pub fn out_edges(&self, i: usize) -> impl Iterator<Item = &EdgeSpec> {
        self.out_edges[i].iter().map(|&e| &self.edges[e])
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn topo_ids(&self) -> Vec<&str> {
        self.topo.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    pub fn sources(&self) -> Vec<&str> {
        self.sources.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    pub fn sinks(&self) -> Vec<&str> {
        self.sinks.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    /// Multiplies every node's layer count by `factor` (model-scale sweeps).
    pub fn scaled_layers(&self, factor: u32) -> Self {
        let mut out = self.clone();
        for n in &mut out.nodes {
            n.layer_count = n.layer_count.saturating_mul(factor.max(1));
        }
        out
    }

    /// Longest source→sink path over per-node weights (already layer-scaled).
    ///
    /// Returns the length and node indices. Ties go to the lexicographically
    /// smallest id sequence.
    pub fn longest_path(&self, weights: &[f64]) -> (f64, Vec<usize>) {
        let n = self.nodes.len();
        let mut best = vec![0.0f64; n];
        let mut next: Vec<Option<usize>> = vec![None; n];
        for &v in self.topo.iter().rev() {
            let mut tail = 0.0;
            let mut choice = None;
            // successors are sorted by id, so the first maximum is the smallest id
            for &w in &self.succ[v] {
                if choice.is_none() || best[w] > tail {
                    tail = best[w];
                    choice = Some(w);
                }
            }
            best[v] = weights[v] + tail;
            next[v] = choice;
        }
        let mut start: Option<usize> = None;
        for &s in &self.sources {
            start = match start {
                None => Some(s),
                Some(c) if best[s] > best[c] => Some(s),
                Some(c) if best[s] == best[c] && self.nodes[s].id < self.nodes[c].id => Some(s),
                keep => keep,
            };
        }
        let start = start.expect("validated DAG has a source");
        let mut path = vec![start];
        let mut cur = start;
        while let Some(w) = next[cur] {
            path.push(w);
            cur = w;
        }
        (best[start], path)
    }

    /// Length only; avoids allocating the path in planner inner loops.
    pub fn longest_path_len(&self, weights: &[f64]) -> f64 {
        let mut best = vec![0.0f64; self.nodes.len()];
        let mut total = f64::NEG_INFINITY;
        for &v in self.topo.iter().rev() {
            let tail = self.succ[v].iter().map(|&w| best[w]).fold(0.0, f64::max);
            best[v] = weights[v] + tail;
        }
        for &s in &self.sources {
            total = total.max(best[s]);
        }
        total
    }
}

/// λ_v = qps / B_v for every node, in batches per second.
pub fn propagate_arrivals(
    dag: &OperatorDag,
    qps: f64,
    batch: &BTreeMap<String, u32>,
) -> Result<BTreeMap<String, f64>, GraphError> {
    if !(qps > 0.0 && qps.is_finite()) {
        return Err(GraphError::InvalidArgument(format!("qps must be positive, got {qps}")));
    }
    dag.nodes()
        .iter()
        .map(|n| {
            let b = *batch
                .get(&n.id)
                .ok_or_else(|| GraphError::InvalidArgument(format!("no batch size for `{}`", n.id)))?;
            if b == 0 {
                return Err(GraphError::InvalidArgument(format!("batch for `{}` must be >= 1", n.id)));
            }
            Ok((n.id.clone(), arrival_rate(qps, b)))
        })
        .collect()
}

#[inline]
pub fn arrival_rate(qps: f64, batch: u32) -> f64 {
    qps / f64::from(batch)
}

/// Critical-path iteration latency and one maximizing path.
pub fn critical_path_latency(
    dag: &OperatorDag,
    sojourn: &SojournMap,
) -> Result<(f64, Vec<String>), GraphError> {
    let weights = dag
        .nodes()
        .iter()
        .map(|n| {
            let t = sojourn
                .entries
                .get(&n.id)
                .ok_or_else(|| GraphError::MissingSojourn(n.id.clone()))?;
            Ok((t.sojourn + t.comm) * f64::from(n.layer_count))
        })
        .collect::<Result<Vec<_>, GraphError>>()?;
    let (len, path) = dag.longest_path(&weights);
    Ok((len, path.into_iter().map(|i| dag.node(i).id.clone()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, layers: u32) -> OperatorNode {
        OperatorNode {
            id: id.into(),
            kind: OperatorKind::Other,
            layer_count: layers,
            profile_ref: id.into(),
        }
    }

    fn edge(s: &str, d: &str) -> EdgeSpec {
        EdgeSpec { src: s.into(), dst: d.into(), volume_ref: None }
    }

    fn spec(nodes: &[(&str, u32)], edges: &[(&str, &str)]) -> DagSpec {
        DagSpec {
            nodes: nodes.iter().map(|&(id, l)| node(id, l)).collect(),
            edges: edges.iter().map(|&(s, d)| edge(s, d)).collect(),
        }
    }

    #[test]
    fn chain_topological_order() {
        let dag = build_dag(&spec(
            &[("linear", 1), ("attn", 1), ("embed", 1)],
            &[("embed", "attn"), ("attn", "linear")],
        ))
        .unwrap();
        assert_eq!(dag.topo_ids(), vec!["embed", "attn", "linear"]);
    }

    #[test]
    fn back_edge_is_named() {
        let err = build_dag(&spec(
            &[("embed", 1), ("attn", 1), ("linear", 1)],
            &[("embed", "attn"), ("attn", "linear"), ("linear", "embed")],
        ))
        .unwrap_err();
        assert!(matches!(err, GraphError::CycleDetected { .. }));
        assert_eq!(
            err,
            GraphError::CycleDetected { src: "linear".into(), dst: "embed".into() }
        );
    }

    #[test]
    fn diamond_has_single_source_and_sink() {
        let dag = build_dag(&spec(
            &[("s", 1), ("a", 1), ("b", 1), ("t", 1)],
            &[("s", "a"), ("s", "b"), ("a", "t"), ("b", "t")],
        ))
        .unwrap();
        assert_eq!(dag.sources(), vec!["s"]);
        assert_eq!(dag.sinks(), vec!["t"]);
    }

    #[test]
    fn dangling_and_duplicate_and_layers() {
        let err = build_dag(&spec(&[("a", 1)], &[("a", "ghost")])).unwrap_err();
        assert_eq!(
            err,
            GraphError::DanglingEdge { src: "a".into(), dst: "ghost".into(), missing: "ghost".into() }
        );
        assert_eq!(
            build_dag(&spec(&[("a", 1), ("a", 1)], &[])).unwrap_err(),
            GraphError::DuplicateNode("a".into())
        );
        assert_eq!(
            build_dag(&spec(&[("a", 0)], &[])).unwrap_err(),
            GraphError::InvalidLayerCount("a".into())
        );
        assert_eq!(build_dag(&DagSpec::default()).unwrap_err(), GraphError::Empty);
    }

    #[test]
    fn arrivals() {
        let dag = build_dag(&spec(&[("attn", 1), ("norm", 1)], &[("attn", "norm")])).unwrap();
        let uniform = BTreeMap::from([("attn".to_string(), 8), ("norm".to_string(), 8)]);
        let lam = propagate_arrivals(&dag, 40.0, &uniform).unwrap();
        assert!(lam.values().all(|&l| l == 5.0));
        let mixed = BTreeMap::from([("attn".to_string(), 2), ("norm".to_string(), 5)]);
        let lam = propagate_arrivals(&dag, 10.0, &mixed).unwrap();
        assert_eq!(lam["attn"], 5.0);
        assert_eq!(lam["norm"], 2.0);
        let ones = BTreeMap::from([("attn".to_string(), 1), ("norm".to_string(), 1)]);
        assert_eq!(propagate_arrivals(&dag, 10.0, &ones).unwrap()["attn"], 10.0);
        assert!(propagate_arrivals(&dag, 0.0, &ones).is_err());
    }

    #[test]
    fn chain_and_diamond_critical_paths() {
        let chain = build_dag(&spec(&[("a", 1), ("b", 1), ("c", 1)], &[("a", "b"), ("b", "c")])).unwrap();
        let soj: SojournMap = [("a", 1.0, 0.0), ("b", 2.0, 0.0), ("c", 3.0, 0.0)].into_iter().collect();
        assert_eq!(critical_path_latency(&chain, &soj).unwrap(), (6.0, vec!["a".into(), "b".into(), "c".into()]));

        let diamond = build_dag(&spec(
            &[("s", 1), ("a", 1), ("b", 1), ("t", 1)],
            &[("s", "a"), ("s", "b"), ("a", "t"), ("b", "t")],
        ))
        .unwrap();
        let soj: SojournMap =
            [("s", 1.0, 0.0), ("a", 2.0, 0.0), ("b", 5.0, 0.0), ("t", 1.0, 0.0)].into_iter().collect();
        let (len, path) = critical_path_latency(&diamond, &soj).unwrap();
        assert_eq!(len, 7.0);
        assert_eq!(path, vec!["s", "b", "t"]);
    }

    #[test]
    fn layer_count_scales_contribution() {
        let dag = build_dag(&spec(&[("a", 1), ("b", 32)], &[("a", "b")])).unwrap();
        let soj: SojournMap = [("a", 1.0, 0.0), ("b", 2.0, 0.0)].into_iter().collect();
        assert_eq!(critical_path_latency(&dag, &soj).unwrap().0, 65.0);
    }

    #[test]
    fn ties_prefer_smallest_ids() {
        let dag = build_dag(&spec(
            &[("s", 1), ("y", 1), ("x", 1), ("t", 1)],
            &[("s", "y"), ("s", "x"), ("y", "t"), ("x", "t")],
        ))
        .unwrap();
        let soj: SojournMap =
            [("s", 1.0, 0.0), ("x", 2.0, 0.0), ("y", 2.0, 0.0), ("t", 1.0, 0.0)].into_iter().collect();
        assert_eq!(critical_path_latency(&dag, &soj).unwrap().1, vec!["s", "x", "t"]);
    }

    #[test]
    fn missing_sojourn() {
        let dag = build_dag(&spec(&[("a", 1), ("b", 1)], &[("a", "b")])).unwrap();
        let soj: SojournMap = [("a", 1.0, 0.0)].into_iter().collect();
        assert_eq!(critical_path_latency(&dag, &soj).unwrap_err(), GraphError::MissingSojourn("b".into()));
    }

    #[test]
    fn comm_adds_to_node_weight() {
        let dag = build_dag(&spec(&[("a", 2), ("b", 1)], &[("a", "b")])).unwrap();
        let soj: SojournMap = [("a", 1.0, 0.5), ("b", 1.0, 0.0)].into_iter().collect();
        assert_eq!(critical_path_latency(&dag, &soj).unwrap().0, 4.0);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    /// Random forward-edge DAG with node weights.
    fn weighted_dag() -> impl Strategy<Value = (OperatorDag, Vec<f64>)> {
        (1usize..9)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(any::<bool>(), n * n),
                    proptest::collection::vec(0.0f64..10.0, n),
                )
            })
            .prop_map(|(n, mask, w)| {
                let nodes = (0..n)
                    .map(|i| OperatorNode {
                        id: format!("n{i}"),
                        kind: OperatorKind::Other,
                        layer_count: 1,
                        profile_ref: format!("n{i}"),
                    })
                    .collect();
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if mask[i * n + j] {
                            edges.push(EdgeSpec { src: format!("n{i}"), dst: format!("n{j}"), volume_ref: None });
                        }
                    }
                }
                (build_dag(&DagSpec { nodes, edges }).unwrap(), w)
            })
    }

    proptest! {
        #[test]
        fn longest_path_is_bounded((dag, w) in weighted_dag()) {
            let (len, path) = dag.longest_path(&w);
            let max = w.iter().copied().fold(0.0, f64::max);
            prop_assert!(len >= max - 1e-12);
            prop_assert!(len <= w.iter().sum::<f64>() + 1e-12);
            let along: f64 = path.iter().map(|&i| w[i]).sum();
            prop_assert!((along - len).abs() < 1e-9);
            for pair in path.windows(2) {
                prop_assert!(dag.successors(pair[0]).contains(&pair[1]));
            }
        }

        #[test]
        fn longest_path_grows_with_weights((dag, w) in weighted_dag(), k in 0usize..8, bump in 0.0f64..5.0) {
            let mut heavier = w.clone();
            let k = k % heavier.len();
            heavier[k] += bump;
            prop_assert!(dag.longest_path_len(&heavier) >= dag.longest_path_len(&w));
        }

        #[test]
        fn topological_order_respects_edges((dag, _w) in weighted_dag()) {
            let order = dag.topo_order();
            let pos: Vec<usize> = (0..dag.len()).map(|i| order.iter().position(|&x| x == i).unwrap()).collect();
            for i in 0..dag.len() {
                for &j in dag.successors(i) {
                    prop_assert!(pos[i] < pos[j]);
                }
            }
        }
    }
}
