// SPDX-License-Identifier: Apache-2.0

//! Energy attribution, provisioned memory and savings reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoscaler::{Evaluator, ScalingPlan};
use crate::opgraph::OperatorDag;
use crate::perfmodel::{InterferenceParams, ProfileSet};
use crate::placement::{adjusted_evals, Placement};
use crate::workload::WorkloadPoint;

pub const REFERENCE_POWER: f64 = 400.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scenarios differ: baseline fingerprint {baseline}, candidate fingerprint {candidate}")]
    MismatchedScenario { baseline: String, candidate: String },
    #[error("baseline {0} must be positive")]
    NonPositiveBaseline(&'static str),
    #[error("plan and placement are inconsistent: {0}")]
    Inconsistent(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    /// Watts per GPU unit held, idle or not.
    pub alpha: f64,
    /// Watts while computing.
    pub beta: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self { alpha: 0.3 * REFERENCE_POWER, beta: 0.7 * REFERENCE_POWER }
    }
}

/// `α·units·(W + T) + β·T` for one operator.
pub fn operator_energy(units: f64, wait: f64, service: f64, params: &EnergyParams) -> f64 {
    params.alpha * units * (wait + service) + params.beta * service
}

/// GPU units held by each operator. Base-instance shards and shards alone on
/// a device count one unit each, so unshared deployments reduce to `P·R`;
/// an extra shard sharing its device counts its SM-share fraction.
pub fn gpu_units(placement: &Placement) -> BTreeMap<String, f64> {
    let mut tenants: BTreeMap<u32, usize> = BTreeMap::new();
    for a in &placement.assignments {
        *tenants.entry(a.device).or_default() += 1;
    }
    let mut units: BTreeMap<String, f64> = BTreeMap::new();
    for a in &placement.assignments {
        let u = if a.base || tenants[&a.device] == 1 { 1.0 } else { f64::from(a.sm_share) / 100.0 };
        *units.entry(a.operator.clone()).or_default() += u;
    }
    units
}

/// Energy of one request, summed over operators, using waits and service
/// times adjusted for the interference of `placement`.
pub fn request_energy(
    plan: &ScalingPlan,
    placement: &Placement,
    dag: &OperatorDag,
    profiles: &ProfileSet,
    interference: &InterferenceParams,
    params: &EnergyParams,
) -> Result<f64, MetricsError> {
    let ev = Evaluator::new(dag, profiles, &plan.point).map_err(|e| MetricsError::Inconsistent(e.to_string()))?;
    let evals = adjusted_evals(&ev, plan, placement, interference)
        .ok_or_else(|| MetricsError::Inconsistent("placement makes a queue unstable".into()))?;
    let units = gpu_units(placement);
    let mut total = 0.0;
    for (node, e) in dag.nodes().iter().zip(&evals) {
        let u = units.get(&node.id).copied().unwrap_or(0.0);
        total += operator_energy(u, e.wait, e.service, params);
    }
    Ok(total)
}

/// Bytes allocated across all placed shards.
pub fn provisioned_memory(placement: &Placement) -> f64 {
    placement.assignments.iter().map(|a| a.mem).sum()
}

/// Hex digest identifying the workload point and SLO.
pub fn scenario_fingerprint(point: &WorkloadPoint, slo: f64) -> String {
    let mut h = Sha256::new();
    h.update(point.qps.to_bits().to_le_bytes());
    h.update(point.seq_len.to_le_bytes());
    h.update(point.phase.to_string().as_bytes());
    h.update(slo.to_bits().to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Headline numbers of one planned and placed scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub label: String,
    pub fingerprint: String,
    pub devices: usize,
    pub gpu_units: u64,
    pub energy: f64,
    pub memory: f64,
    pub iteration_latency: f64,
    pub feasible: bool,
}

pub fn evaluate_scenario(
    label: &str,
    plan: &ScalingPlan,
    placement: &Placement,
    dag: &OperatorDag,
    profiles: &ProfileSet,
    interference: &InterferenceParams,
    params: &EnergyParams,
) -> Result<ScenarioMetrics, MetricsError> {
    Ok(ScenarioMetrics {
        label: label.to_string(),
        fingerprint: scenario_fingerprint(&plan.point, plan.slo),
        devices: placement.devices_used,
        gpu_units: plan.objective,
        energy: request_energy(plan, placement, dag, profiles, interference, params)?,
        memory: provisioned_memory(placement),
        iteration_latency: placement.iteration_latency,
        feasible: placement.feasible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub baseline_label: String,
    pub candidate_label: String,
    pub gpu_savings: f64,
    pub energy_savings: f64,
    pub memory_savings: f64,
    pub baseline: ScenarioMetrics,
    pub candidate: ScenarioMetrics,
}

fn fraction(base: f64, cand: f64, what: &'static str) -> Result<f64, MetricsError> {
    if base.is_nan() || base <= 0.0 {
        return Err(MetricsError::NonPositiveBaseline(what));
    }
    Ok((base - cand) / base)
}

/// `(baseline − candidate) / baseline` for devices, energy and memory.
pub fn compare(baseline: &ScenarioMetrics, candidate: &ScenarioMetrics) -> Result<SavingsReport, MetricsError> {
    if baseline.fingerprint != candidate.fingerprint {
        return Err(MetricsError::MismatchedScenario {
            baseline: baseline.fingerprint.clone(),
            candidate: candidate.fingerprint.clone(),
        });
    }
    Ok(SavingsReport {
        baseline_label: baseline.label.clone(),
        candidate_label: candidate.label.clone(),
        gpu_savings: fraction(baseline.devices as f64, candidate.devices as f64, "device count")?,
        energy_savings: fraction(baseline.energy, candidate.energy, "energy")?,
        memory_savings: fraction(baseline.memory, candidate.memory, "memory")?,
        baseline: baseline.clone(),
        candidate: candidate.clone(),
    })
}

/// One line of a sweep or autoscale report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sweep_var: String,
    pub value: f64,
    pub gpu_savings: f64,
    pub energy_savings: f64,
    pub memory_savings: f64,
    pub feasible_baseline: bool,
    pub feasible_candidate: bool,
    pub fingerprint: String,
}

impl ReportRow {
    pub fn new(sweep_var: &str, value: f64, report: &SavingsReport) -> Self {
        Self {
            sweep_var: sweep_var.to_string(),
            value,
            gpu_savings: report.gpu_savings,
            energy_savings: report.energy_savings,
            memory_savings: report.memory_savings,
            feasible_baseline: report.baseline.feasible,
            feasible_candidate: report.candidate.feasible,
            fingerprint: report.baseline.fingerprint.clone(),
        }
    }
}

pub fn write_rows<W: Write>(writer: W, rows: &[ReportRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record([
            "sweep_var",
            "value",
            "gpu_savings",
            "energy_savings",
            "memory_savings",
            "feasible_baseline",
            "feasible_candidate",
            "fingerprint",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::Phase;
    use crate::placement::{DeviceLoad, ReplicaAssignment};

    fn metrics(label: &str, devices: usize, energy: f64, memory: f64) -> ScenarioMetrics {
        ScenarioMetrics {
            label: label.into(),
            fingerprint: scenario_fingerprint(&WorkloadPoint::new(5.0, 1024, Phase::Prefill), 1.0),
            devices,
            gpu_units: devices as u64,
            energy,
            memory,
            iteration_latency: 0.5,
            feasible: true,
        }
    }

    #[test]
    fn energy_examples() {
        let unit = EnergyParams { alpha: 1.0, beta: 0.0 };
        assert_eq!(operator_energy(1.0, 0.0, 2.0, &unit), 2.0);
        let no_alpha = EnergyParams { alpha: 0.0, beta: 3.0 };
        assert_eq!(operator_energy(1.0, 0.5, 2.0, &no_alpha), operator_energy(16.0, 0.5, 2.0, &no_alpha));
        let p = EnergyParams::default();
        let one = operator_energy(2.0, 0.3, 0.7, &p);
        let two = operator_energy(4.0, 0.3, 0.7, &p);
        let alpha_term = p.alpha * 2.0 * (0.3 + 0.7);
        assert!((two - one - alpha_term).abs() < 1e-12);
    }

    #[test]
    fn energy_is_linear_in_coefficients() {
        let a = EnergyParams { alpha: 2.0, beta: 0.0 };
        let b = EnergyParams { alpha: 0.0, beta: 5.0 };
        let ab = EnergyParams { alpha: 2.0, beta: 5.0 };
        let (u, w, t) = (3.0, 0.01, 0.02);
        let sum = operator_energy(u, w, t, &a) + operator_energy(u, w, t, &b);
        assert!((operator_energy(u, w, t, &ab) - sum).abs() < 1e-15);
    }

    #[test]
    fn savings_examples() {
        let r = compare(&metrics("model", 10, 100.0, 8.0), &metrics("op", 6, 65.0, 8.0)).unwrap();
        assert!((r.gpu_savings - 0.4).abs() < 1e-15);
        assert!((r.energy_savings - 0.35).abs() < 1e-15);
        assert_eq!(r.memory_savings, 0.0);
        let same = compare(&metrics("a", 4, 10.0, 2.0), &metrics("b", 4, 10.0, 2.0)).unwrap();
        assert_eq!((same.gpu_savings, same.energy_savings, same.memory_savings), (0.0, 0.0, 0.0));
        let worse = compare(&metrics("a", 4, 10.0, 2.0), &metrics("b", 5, 10.0, 2.0)).unwrap();
        assert!((worse.gpu_savings + 0.25).abs() < 1e-15);
    }

    #[test]
    fn swapped_comparison_maps_fractions() {
        let a = metrics("a", 10, 120.0, 9.0);
        let b = metrics("b", 7, 80.0, 11.0);
        let f = compare(&a, &b).unwrap();
        let g = compare(&b, &a).unwrap();
        for (x, y) in [
            (f.gpu_savings, g.gpu_savings),
            (f.energy_savings, g.energy_savings),
            (f.memory_savings, g.memory_savings),
        ] {
            assert!((y - x / (x - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_fingerprints_rejected() {
        let a = metrics("a", 1, 1.0, 1.0);
        let mut b = metrics("b", 1, 1.0, 1.0);
        b.fingerprint = scenario_fingerprint(&WorkloadPoint::new(5.0, 2048, Phase::Prefill), 1.0);
        assert!(matches!(compare(&a, &b), Err(MetricsError::MismatchedScenario { .. })));
    }

    #[test]
    fn colocated_extras_hold_their_share() {
        let asg = |op: &str, device: u32, share: u32, mem: f64| ReplicaAssignment {
            operator: op.into(),
            replica: 0,
            shard: 0,
            device,
            base: op != "c",
            sm_share: share,
            mem,
            interference_adjusted_latency: 0.0,
        };
        let placement = Placement {
            assignments: vec![
                asg("a", 0, 100, 16e9),
                asg("b", 0, 100, 1e9),
                asg("c", 0, 30, 1e9),
                asg("c", 1, 30, 1e9),
            ],
            devices: vec![],
            devices_used: 2,
            iteration_latency: 0.0,
            feasible: true,
        };
        let u = gpu_units(&placement);
        assert_eq!((u["a"], u["b"], u["c"]), (1.0, 1.0, 1.3));
        assert_eq!(provisioned_memory(&placement), 19e9);
        let empty = Placement { assignments: vec![], devices: Vec::<DeviceLoad>::new(), ..placement };
        assert_eq!(provisioned_memory(&empty), 0.0);
    }

    #[test]
    fn csv_rows_are_stable() {
        let r = compare(&metrics("model", 10, 100.0, 8.0), &metrics("op", 6, 65.0, 4.0)).unwrap();
        let rows = vec![ReportRow::new("qps", 5.0, &r)];
        let mut a = Vec::new();
        write_rows(&mut a, &rows).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(
            "sweep_var,value,gpu_savings,energy_savings,memory_savings,feasible_baseline,feasible_candidate,fingerprint\n"
        ));
        assert!(text.contains("qps,5.0,0.4,0.35,0.5,true,true,"));
    }
}
