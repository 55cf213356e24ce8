// SPDX-License-Identifier: Apache-2.0

//! Request traces and their reduction to per-window evaluation points.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perfmodel::Phase;

pub const TRACE_HEADER: [&str; 3] = ["timestamp_s", "input_tokens", "output_tokens"];
pub const DEFAULT_WINDOW_LEN: f64 = 60.0;
pub const DEFAULT_QUANTILE: f64 = 0.95;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}, column {column}: {reason}")]
    ParseError { line: u64, column: String, reason: String },
    #[error("trace contains no requests")]
    EmptyTrace,
    #[error("invalid workload parameter: {0}")]
    InvalidParameter(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    /// Seconds.
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
}

/// One planning input: a request rate and representative length for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPoint {
    pub qps: f64,
    pub seq_len: u32,
    pub phase: Phase,
    pub window: (f64, f64),
}

impl WorkloadPoint {
    pub fn new(qps: f64, seq_len: u32, phase: Phase) -> Self {
        Self { qps, seq_len, phase, window: (0.0, 0.0) }
    }
}

pub fn load_trace(path: &Path) -> Result<Vec<RequestRecord>, WorkloadError> {
    let file = std::fs::File::open(path)?;
    parse_trace(file)
}

/// Parses a trace CSV. Rows come back sorted by arrival (stable for ties).
pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<RequestRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, WorkloadError> {
        headers.iter().position(|h| h == name).ok_or_else(|| WorkloadError::ParseError {
            line: 1,
            column: name.to_string(),
            reason: "missing column in header".into(),
        })
    };
    let (ti, ii, oi) = (col(TRACE_HEADER[0])?, col(TRACE_HEADER[1])?, col(TRACE_HEADER[2])?);

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |idx: usize, name: &str| -> Result<&str, WorkloadError> {
            row.get(idx).ok_or_else(|| WorkloadError::ParseError {
                line,
                column: name.to_string(),
                reason: "missing field".into(),
            })
        };
        let bad = |name: &str, reason: String| WorkloadError::ParseError {
            line,
            column: name.to_string(),
            reason,
        };
        let ts: f64 = field(ti, TRACE_HEADER[0])?
            .parse()
            .map_err(|e| bad(TRACE_HEADER[0], format!("{e}")))?;
        if !ts.is_finite() || ts < 0.0 {
            return Err(bad(TRACE_HEADER[0], format!("timestamp must be finite and >= 0, got {ts}")));
        }
        let input: u32 = field(ii, TRACE_HEADER[1])?
            .parse()
            .map_err(|e| bad(TRACE_HEADER[1], format!("{e}")))?;
        if input == 0 {
            return Err(bad(TRACE_HEADER[1], "input_tokens must be >= 1".into()));
        }
        let output: u32 = field(oi, TRACE_HEADER[2])?
            .parse()
            .map_err(|e| bad(TRACE_HEADER[2], format!("{e}")))?;
        out.push(RequestRecord { arrival_time: ts, input_len: input, output_len: output });
    }
    if out.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(out)
}

pub fn write_trace<W: Write>(writer: W, records: &[RequestRecord]) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record([
            r.arrival_time.to_string(),
            r.input_len.to_string(),
            r.output_len.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(path: &Path, records: &[RequestRecord]) -> Result<(), WorkloadError> {
    write_trace(std::fs::File::create(path)?, records)
}

/// Nearest-rank quantile of a non-empty slice.
pub fn quantile_u32(values: &mut [u32], q: f64) -> u32 {
    debug_assert!(!values.is_empty());
    values.sort_unstable();
    let n = values.len();
    let rank = (q * n as f64).ceil() as usize;
    values[rank.clamp(1, n) - 1]
}

/// Splits a trace into fixed windows and returns `(prefill, decode)` points
/// per window.
///
/// Prefill qps is arrivals per second with the chosen input-length quantile;
/// decode qps is generated tokens per second at length 1.
pub fn windowize(
    records: &[RequestRecord],
    window_len: f64,
    quantile: f64,
) -> Result<Vec<(WorkloadPoint, WorkloadPoint)>, WorkloadError> {
    if !(window_len > 0.0 && window_len.is_finite()) {
        return Err(WorkloadError::InvalidParameter(format!("window_len must be positive, got {window_len}")));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(WorkloadError::InvalidParameter(format!("quantile must lie in (0, 1], got {quantile}")));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let start = records.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
    let end = records.iter().map(|r| r.arrival_time).fold(f64::NEG_INFINITY, f64::max);
    let count = (((end - start) / window_len).floor() as usize) + 1;
    let mut buckets: Vec<Vec<&RequestRecord>> = vec![Vec::new(); count];
    for r in records {
        let k = (((r.arrival_time - start) / window_len).floor() as usize).min(count - 1);
        buckets[k].push(r);
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(k, reqs)| {
            let w0 = start + k as f64 * window_len;
            let window = (w0, w0 + window_len);
            let mut inputs: Vec<u32> = reqs.iter().map(|r| r.input_len).collect();
            let seq_len = if inputs.is_empty() { 1 } else { quantile_u32(&mut inputs, quantile) };
            let tokens: u64 = reqs.iter().map(|r| u64::from(r.output_len)).sum();
            (
                WorkloadPoint {
                    qps: reqs.len() as f64 / window_len,
                    seq_len,
                    phase: Phase::Prefill,
                    window,
                },
                WorkloadPoint {
                    qps: tokens as f64 / window_len,
                    seq_len: 1,
                    phase: Phase::Decode,
                    window,
                },
            )
        })
        .collect())
}

/// Whole-trace aggregate point for one phase.
pub fn aggregate_point(records: &[RequestRecord], phase: Phase, quantile: f64) -> Result<WorkloadPoint, WorkloadError> {
    if records.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    let start = records.iter().map(|r| r.arrival_time).fold(f64::INFINITY, f64::min);
    let end = records.iter().map(|r| r.arrival_time).fold(f64::NEG_INFINITY, f64::max);
    // a single-instant trace is treated as spanning one second
    let span = if end > start { end - start } else { 1.0 };
    let point = match phase {
        Phase::Prefill => {
            let mut inputs: Vec<u32> = records.iter().map(|r| r.input_len).collect();
            WorkloadPoint {
                qps: records.len() as f64 / span,
                seq_len: quantile_u32(&mut inputs, quantile),
                phase,
                window: (start, start + span),
            }
        }
        Phase::Decode => {
            let tokens: u64 = records.iter().map(|r| u64::from(r.output_len)).sum();
            WorkloadPoint { qps: tokens as f64 / span, seq_len: 1, phase, window: (start, start + span) }
        }
    };
    Ok(point)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Constant,
    Diurnal,
    Burst,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Constant => "constant",
            SynthKind::Diurnal => "diurnal",
            SynthKind::Burst => "burst",
        })
    }
}

/// Synthetic workload parameters.
///
/// Parsed from `kind:key=value,...`, e.g.
/// `diurnal:rate=40,duration=3600,amplitude=0.5,input=1024,input_sigma=0.8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Mean requests per second.
    pub rate: f64,
    /// Seconds.
    pub duration: f64,
    /// Diurnal relative amplitude in [0, 1].
    pub amplitude: f64,
    /// Diurnal period, seconds.
    pub period: f64,
    /// Burst multiplier on `rate` while a burst is active.
    pub burst_factor: f64,
    pub burst_period: f64,
    /// Fraction of each burst period spent bursting.
    pub burst_duty: f64,
    /// Median input length (log-normal).
    pub input: f64,
    pub input_sigma: f64,
    pub output: f64,
    pub output_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::Constant,
            rate: 10.0,
            duration: 60.0,
            amplitude: 0.5,
            period: 3600.0,
            burst_factor: 3.0,
            burst_period: 300.0,
            burst_duty: 0.2,
            input: 1024.0,
            input_sigma: 0.0,
            output: 128.0,
            output_sigma: 0.0,
        }
    }
}

impl SynthSpec {
    fn rate_at(&self, t: f64) -> f64 {
        match self.kind {
            SynthKind::Constant => self.rate,
            SynthKind::Diurnal => {
                self.rate * (1.0 + self.amplitude * (2.0 * std::f64::consts::PI * t / self.period).sin())
            }
            SynthKind::Burst => {
                let phase = (t % self.burst_period) / self.burst_period;
                if phase < self.burst_duty {
                    self.rate * self.burst_factor
                } else {
                    self.rate
                }
            }
        }
    }

    fn peak_rate(&self) -> f64 {
        match self.kind {
            SynthKind::Constant => self.rate,
            SynthKind::Diurnal => self.rate * (1.0 + self.amplitude),
            SynthKind::Burst => self.rate * self.burst_factor.max(1.0),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidParameter(m));
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return bad(format!("amplitude must lie in [0, 1], got {}", self.amplitude));
        }
        if self.period <= 0.0 || self.burst_period <= 0.0 {
            return bad("periods must be positive".into());
        }
        if self.burst_factor < 0.0 || !(0.0..=1.0).contains(&self.burst_duty) {
            return bad("burst_factor must be >= 0 and burst_duty in [0, 1]".into());
        }
        if self.input < 1.0 || self.output < 0.0 || self.input_sigma < 0.0 || self.output_sigma < 0.0 {
            return bad("input >= 1, output >= 0 and sigmas >= 0 required".into());
        }
        Ok(())
    }
}

impl FromStr for SynthSpec {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut spec = SynthSpec {
            kind: match kind.trim() {
                "constant" => SynthKind::Constant,
                "diurnal" => SynthKind::Diurnal,
                "burst" => SynthKind::Burst,
                other => return Err(WorkloadError::InvalidParameter(format!("unknown synth kind `{other}`"))),
            },
            ..Default::default()
        };
        for kv in rest.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| WorkloadError::InvalidParameter(format!("expected key=value, got `{kv}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| WorkloadError::InvalidParameter(format!("`{k}` is not a number: `{v}`")))?;
            match k.trim() {
                "rate" => spec.rate = v,
                "duration" => spec.duration = v,
                "amplitude" => spec.amplitude = v,
                "period" => spec.period = v,
                "factor" | "burst_factor" => spec.burst_factor = v,
                "burst_period" => spec.burst_period = v,
                "duty" | "burst_duty" => spec.burst_duty = v,
                "input" => spec.input = v,
                "input_sigma" => spec.input_sigma = v,
                "output" => spec.output = v,
                "output_sigma" => spec.output_sigma = v,
                other => return Err(WorkloadError::InvalidParameter(format!("unknown synth key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn sample_len<R: Rng>(rng: &mut R, median: f64, sigma: f64, min: u32) -> u32 {
    let v = if sigma > 0.0 {
        LogNormal::new(median.ln(), sigma).expect("valid log-normal").sample(rng)
    } else {
        median
    };
    (v.round().min(f64::from(u32::MAX)) as u32).max(min)
}

/// Generates a synthetic request trace. Deterministic for a given seed.
///
/// All kinds share one thinning sampler at the peak rate, so a diurnal trace
/// with zero amplitude or a burst trace with factor 1 reproduces the constant
/// trace for the same seed exactly.
pub fn synth_workload(spec: &SynthSpec, seed: u64) -> Result<Vec<RequestRecord>, WorkloadError> {
    spec.validate()?;
    let peak = spec.peak_rate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if peak <= 0.0 {
        return Ok(out);
    }
    let gap = Exp::new(peak).map_err(|e| WorkloadError::InvalidParameter(e.to_string()))?;
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t >= spec.duration {
            break;
        }
        let accept: f64 = rng.random();
        let input = sample_len(&mut rng, spec.input, spec.input_sigma, 1);
        let output = sample_len(&mut rng, spec.output, spec.output_sigma, 0);
        if accept * peak < spec.rate_at(t) {
            out.push(RequestRecord { arrival_time: t, input_len: input, output_len: output });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_sorts_rows() {
        let csv = "timestamp_s,input_tokens,output_tokens\n2.0,10,5\n0.5,20,0\n1.0,30,7\n";
        let recs = parse_trace(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs.iter().map(|r| r.input_len).collect::<Vec<_>>(), vec![20, 30, 10]);
    }

    #[test]
    fn stable_sort_for_equal_timestamps() {
        let csv = "timestamp_s,input_tokens,output_tokens\n1.0,3,0\n0.0,9,0\n1.0,1,0\n1.0,2,0\n";
        let recs = parse_trace(csv.as_bytes()).unwrap();
        assert_eq!(recs.iter().map(|r| r.input_len).collect::<Vec<_>>(), vec![9, 3, 1, 2]);
    }

    #[test]
    fn zero_input_is_rejected_with_line() {
        let csv = "timestamp_s,input_tokens,output_tokens\n0.0,5,1\n1.0,0,1\n";
        match parse_trace(csv.as_bytes()).unwrap_err() {
            WorkloadError::ParseError { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "input_tokens");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_garbled() {
        let csv = "timestamp_s,input_tokens,output_tokens\n";
        assert!(matches!(parse_trace(csv.as_bytes()), Err(WorkloadError::EmptyTrace)));
        let csv = "timestamp_s,input_tokens,output_tokens\nabc,1,1\n";
        assert!(matches!(parse_trace(csv.as_bytes()), Err(WorkloadError::ParseError { line: 2, .. })));
        let csv = "time,input_tokens,output_tokens\n0,1,1\n";
        assert!(matches!(parse_trace(csv.as_bytes()), Err(WorkloadError::ParseError { line: 1, .. })));
    }

    #[test]
    fn window_counts() {
        let recs: Vec<RequestRecord> = (0..40)
            .map(|i| RequestRecord { arrival_time: i as f64 / 40.0, input_len: 100, output_len: 50 })
            .collect();
        let w = windowize(&recs, 1.0, 0.95).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].0.qps, 40.0);
        assert_eq!(w[0].0.seq_len, 100);
        assert_eq!(w[0].1.qps, 2000.0);
        assert_eq!(w[0].1.seq_len, 1);
        assert_eq!(w[0].1.phase, Phase::Decode);
    }

    #[test]
    fn empty_windows_have_zero_rate() {
        let recs = vec![
            RequestRecord { arrival_time: 0.0, input_len: 5, output_len: 1 },
            RequestRecord { arrival_time: 2.5, input_len: 5, output_len: 1 },
        ];
        let w = windowize(&recs, 1.0, 0.5).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].0.qps, 0.0);
        assert_eq!(w[1].0.seq_len, 1);
    }

    #[test]
    fn quantile_nearest_rank() {
        let mut v = vec![5, 1, 4, 2, 3, 6, 7, 8, 9, 10];
        assert_eq!(quantile_u32(&mut v, 0.95), 10);
        assert_eq!(quantile_u32(&mut v, 0.5), 5);
        assert_eq!(quantile_u32(&mut v, 0.1), 1);
        let mut same = vec![7; 13];
        assert_eq!(quantile_u32(&mut same, 0.37), 7);
    }

    #[test]
    fn synth_constant_rate() {
        let spec: SynthSpec = "constant:rate=10,duration=100".parse().unwrap();
        let a = synth_workload(&spec, 9).unwrap();
        let b = synth_workload(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert!((a.len() as f64 - 1000.0).abs() < 150.0, "{}", a.len());
        assert!(a.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    }

    #[test]
    fn degenerate_kinds_match_constant() {
        let c: SynthSpec = "constant:rate=5,duration=50,input=300,input_sigma=0.5".parse().unwrap();
        let d: SynthSpec = "diurnal:rate=5,duration=50,amplitude=0,input=300,input_sigma=0.5".parse().unwrap();
        let b: SynthSpec = "burst:rate=5,duration=50,factor=1,input=300,input_sigma=0.5".parse().unwrap();
        let base = synth_workload(&c, 4).unwrap();
        assert_eq!(base, synth_workload(&d, 4).unwrap());
        assert_eq!(base, synth_workload(&b, 4).unwrap());
    }

    #[test]
    fn synth_spec_errors() {
        assert!("poisson:rate=1".parse::<SynthSpec>().is_err());
        assert!("constant:rate=-1".parse::<SynthSpec>().is_err());
        assert!("constant:speed=1".parse::<SynthSpec>().is_err());
        assert!("diurnal:amplitude=2".parse::<SynthSpec>().is_err());
    }
}
