// SPDX-License-Identifier: Apache-2.0

//! Non-negative least-squares fitting of [`LatencyModel`] coefficients from
//! kernel timing samples.
//!
//! The basis is `{1, B·L, B·L²} / (η·P)`, with the quadratic column present
//! only for attention operators. With at most three unknowns the exact NNLS
//! optimum is found by solving the unconstrained problem on every support
//! subset and keeping the best non-negative solution.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LatencyModel, OperatorKind, PerfError, Phase};

/// Relative singular-value cutoff below which the scaled design is rank deficient.
const RANK_TOL: f64 = 1e-10;

/// One kernel timing measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub op: String,
    pub phase: Phase,
    pub batch: u32,
    pub seqlen: u32,
    pub parallelism: u32,
    /// Seconds.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseFit {
    pub model: LatencyModel,
    pub samples: usize,
    pub rms_residual: f64,
    pub max_rel_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub phases: BTreeMap<Phase, PhaseFit>,
}

impl FitReport {
    pub fn model(&self, phase: Phase) -> Option<LatencyModel> {
        self.phases.get(&phase).map(|f| f.model)
    }
}

/// Fits one latency model per phase present in `samples`.
///
/// Phases without any samples are skipped; a phase with one or two samples or no
/// samples at all is an error.
pub fn fit_profile(samples: &[Sample], kind: OperatorKind, eta: f64) -> Result<FitReport, PerfError> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(PerfError::InvalidArgument(format!("eta must lie in (0, 1], got {eta}")));
    }
    let mut by_phase: BTreeMap<Phase, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        if s.batch == 0 || s.seqlen == 0 || s.parallelism == 0 {
            return Err(PerfError::InvalidArgument(format!(
                "sample for `{}` has a zero batch, seqlen or parallelism",
                s.op
            )));
        }
        if !(s.latency.is_finite() && s.latency >= 0.0) {
            return Err(PerfError::InvalidArgument(format!(
                "sample for `{}` has invalid latency {}",
                s.op, s.latency
            )));
        }
        by_phase.entry(s.phase).or_default().push(s);
    }
    if by_phase.is_empty() {
        return Err(PerfError::InsufficientSamples { phase: Phase::Prefill, got: 0 });
    }

    let mut report = FitReport::default();
    for (phase, rows) in by_phase {
        if rows.len() < 3 {
            return Err(PerfError::InsufficientSamples { phase, got: rows.len() });
        }
        report.phases.insert(phase, fit_phase(phase, &rows, kind, eta)?);
    }
    Ok(report)
}

fn fit_phase(phase: Phase, rows: &[&Sample], kind: OperatorKind, eta: f64) -> Result<PhaseFit, PerfError> {
    let ncols = if kind.has_quadratic_term() { 3 } else { 2 };
    let n = rows.len();
    let mut a = DMatrix::<f64>::zeros(n, ncols);
    let mut y = DVector::<f64>::zeros(n);
    for (i, s) in rows.iter().enumerate() {
        let bl = f64::from(s.batch) * f64::from(s.seqlen);
        let scale = 1.0 / (eta * f64::from(s.parallelism));
        a[(i, 0)] = scale;
        a[(i, 1)] = bl * scale;
        if ncols == 3 {
            a[(i, 2)] = bl * f64::from(s.seqlen) * scale;
        }
        y[i] = s.latency;
    }

    // Column equilibration keeps the 1 / BL / BL² columns comparable.
    let col_scale: Vec<f64> = (0..ncols)
        .map(|j| a.column(j).amax().max(f64::MIN_POSITIVE))
        .collect();
    for (j, s) in col_scale.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / s);
    }

    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax <= 0.0 || sv.min() / smax < RANK_TOL {
        return Err(PerfError::DegenerateDesign { phase });
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << ncols) {
        let cols: Vec<usize> = (0..ncols).filter(|j| mask & (1 << j) != 0).collect();
        let sub = a.select_columns(cols.iter());
        let Some(sol) = least_squares(&sub, &y) else { continue };
        if sol.iter().any(|&c| c < 0.0) {
            continue;
        }
        let mut full = vec![0.0; ncols];
        for (k, &j) in cols.iter().enumerate() {
            full[j] = sol[k];
        }
        let resid = (&a * DVector::from_vec(full.clone()) - &y).norm_squared();
        if best.as_ref().is_none_or(|(r, _)| resid < *r) {
            best = Some((resid, full));
        }
    }
    let coeffs = match best {
        Some((_, c)) => c,
        None => vec![0.0; ncols],
    };
    let unscaled: Vec<f64> = coeffs.iter().zip(&col_scale).map(|(c, s)| c / s).collect();
    let model = LatencyModel {
        c0: unscaled[0],
        c1: unscaled[1],
        c2: if ncols == 3 { unscaled[2] } else { 0.0 },
    };

    let mut sq = 0.0;
    let mut max_rel: f64 = 0.0;
    for s in rows {
        let pred = model.eval(s.batch, s.seqlen) / (eta * f64::from(s.parallelism));
        let r = pred - s.latency;
        sq += r * r;
        if s.latency > 0.0 {
            max_rel = max_rel.max((r / s.latency).abs());
        }
    }
    Ok(PhaseFit {
        model,
        samples: rows.len(),
        rms_residual: (sq / rows.len() as f64).sqrt(),
        max_rel_residual: max_rel,
    })
}

fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * RANK_TOL;
    svd.solve(y, tol).ok()
}

/// Column order of a timing-sample CSV.
pub const SAMPLE_HEADER: [&str; 6] = ["op", "phase", "batch", "seqlen", "parallelism", "latency_us"];

#[derive(Deserialize)]
struct SampleRow {
    op: String,
    phase: Phase,
    batch: u32,
    seqlen: u32,
    parallelism: u32,
    latency_us: f64,
}

/// Reads timing samples; latencies are given in microseconds.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<Sample>, PerfError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| PerfError::Parse(e.to_string()))?.clone();
    if header.iter().ne(SAMPLE_HEADER) {
        return Err(PerfError::Parse(format!(
            "sample header must be `{}`, got `{}`",
            SAMPLE_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<SampleRow>().enumerate() {
        let r = row.map_err(|e| PerfError::Parse(format!("sample row {}: {e}", i + 1)))?;
        out.push(Sample {
            op: r.op,
            phase: r.phase,
            batch: r.batch,
            seqlen: r.seqlen,
            parallelism: r.parallelism,
            latency: r.latency_us * 1e-6,
        });
    }
    if out.is_empty() {
        return Err(PerfError::InsufficientSamples { phase: Phase::Prefill, got: 0 });
    }
    Ok(out)
}
