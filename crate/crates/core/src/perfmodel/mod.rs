// SPDX-License-Identifier: Apache-2.0

//! Parametric operator performance models.
//!
//! Each operator is described by an [`OperatorProfile`]: a per-phase latency
//! polynomial over the token-batch product `B·L`, a memory model split into
//! static weights and transient activations, an outgoing data-volume model,
//! and an SM-demand curve used both for the SM-share slowdown and for the
//! colocation interference model.
//!
//! Latency of one batch on one replica:
//!
//! ```text
//! T = (c0 + c1·B·L + c2·B·L²) / (η·P) · slowdown(sm_share, demand(B, L))
//! ```
//!
//! where `slowdown = max(1, demand / sm_share)` unless the profile carries an
//! explicit SM table.

mod fit;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fit::{fit_profile, read_samples, FitReport, PhaseFit, Sample, SAMPLE_HEADER};

/// Default tensor-parallel efficiency when a profile omits `eta`.
pub const DEFAULT_PARALLEL_EFFICIENCY: f64 = 0.9;
/// Default NVLink-class link bandwidth in bytes/sec.
pub const DEFAULT_LINK_BANDWIDTH: f64 = 600e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("profile `{profile}` has no {phase} latency model")]
    UnknownPhase { profile: String, phase: Phase },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{phase}: need at least 3 samples to fit, got {got}")]
    InsufficientSamples { phase: Phase, got: usize },
    #[error("{phase}: design matrix is rank deficient (samples do not span the latency basis)")]
    DegenerateDesign { phase: Phase },
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("failed to read profiles: {0}")]
    Io(String),
    #[error("failed to parse profiles: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Prefill => f.write_str("prefill"),
            Phase::Decode => f.write_str("decode"),
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// Operator class tag. Only `Attention` admits a quadratic latency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Attention,
    Linear,
    MoeLinear,
    Norm,
    Activation,
    Embedding,
    Elementwise,
    #[default]
    Other,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 8] = [
        OperatorKind::Attention,
        OperatorKind::Linear,
        OperatorKind::MoeLinear,
        OperatorKind::Norm,
        OperatorKind::Activation,
        OperatorKind::Embedding,
        OperatorKind::Elementwise,
        OperatorKind::Other,
    ];

    pub fn has_quadratic_term(self) -> bool {
        self == OperatorKind::Attention
    }
}

/// `c0 + c1·B·L + c2·B·L²` in seconds, before parallelism and SM scaling.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyModel {
    #[serde(default)]
    pub c0: f64,
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
}

impl LatencyModel {
    pub fn new(c0: f64, c1: f64, c2: f64) -> Self {
        Self { c0, c1, c2 }
    }

    /// Raw polynomial value at batch `b` and sequence length `l`.
    pub fn eval(&self, b: u32, l: u32) -> f64 {
        let bl = f64::from(b) * f64::from(l);
        self.c0 + self.c1 * bl + self.c2 * bl * f64::from(l)
    }

    fn validate(&self, name: &str) -> Result<(), PerfError> {
        for (label, v) in [("c0", self.c0), ("c1", self.c1), ("c2", self.c2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::InvalidArgument(format!(
                    "profile `{name}`: {label} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One point of an optional measured SM-share curve: latency multiplier at a given share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmPoint {
    pub share: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorProfile {
    #[serde(default)]
    pub kind: OperatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill: Option<LatencyModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<LatencyModel>,
    /// Static weight bytes for the whole operator; divided across `P` shards.
    #[serde(default)]
    pub weight_mem: f64,
    #[serde(default)]
    pub m0: f64,
    /// Transient bytes per token·batch.
    #[serde(default)]
    pub m1: f64,
    #[serde(default)]
    pub v0: f64,
    /// Outgoing bytes per token·batch.
    #[serde(default)]
    pub v1: f64,
    #[serde(default)]
    pub s0: f64,
    #[serde(default)]
    pub s1: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Overrides the analytic SM-share slowdown when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sm_table: Option<Vec<SmPoint>>,
}

fn default_eta() -> f64 {
    DEFAULT_PARALLEL_EFFICIENCY
}

impl Default for OperatorProfile {
    fn default() -> Self {
        Self {
            kind: OperatorKind::Other,
            prefill: None,
            decode: None,
            weight_mem: 0.0,
            m0: 0.0,
            m1: 0.0,
            v0: 0.0,
            v1: 0.0,
            s0: 0.0,
            s1: 0.0,
            eta: DEFAULT_PARALLEL_EFFICIENCY,
            sm_table: None,
        }
    }
}

impl OperatorProfile {
    pub fn phase_model(&self, phase: Phase) -> Option<&LatencyModel> {
        match phase {
            Phase::Prefill => self.prefill.as_ref(),
            Phase::Decode => self.decode.as_ref(),
        }
    }

    /// Fractional SM utilization of one shard at `(b, l)`, clamped to `[0, 1]`.
    pub fn sm_demand(&self, b: u32, l: u32) -> f64 {
        let bl = f64::from(b) * f64::from(l);
        (self.s0 + self.s1 * bl).clamp(0.0, 1.0)
    }

    /// Latency multiplier from running at `share` of the device's SMs.
    pub fn sm_slowdown(&self, share: f64, b: u32, l: u32) -> f64 {
        if let Some(table) = self.sm_table.as_deref().filter(|t| !t.is_empty()) {
            return interpolate_table(table, share).max(1.0);
        }
        let demand = self.sm_demand(b, l);
        if demand <= 0.0 {
            1.0
        } else {
            (demand / share).max(1.0)
        }
    }

    pub fn validate(&self, name: &str) -> Result<(), PerfError> {
        for m in [self.prefill, self.decode].into_iter().flatten() {
            m.validate(name)?;
            if m.c2 > 0.0 && !self.kind.has_quadratic_term() {
                return Err(PerfError::InvalidArgument(format!(
                    "profile `{name}`: quadratic term only allowed for attention operators"
                )));
            }
        }
        let coeffs = [
            ("weight_mem", self.weight_mem),
            ("m0", self.m0),
            ("m1", self.m1),
            ("v0", self.v0),
            ("v1", self.v1),
            ("s0", self.s0),
            ("s1", self.s1),
        ];
        for (label, v) in coeffs {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PerfError::InvalidArgument(format!(
                    "profile `{name}`: {label} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(PerfError::InvalidArgument(format!(
                "profile `{name}`: eta must lie in (0, 1], got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

fn interpolate_table(table: &[SmPoint], share: f64) -> f64 {
    let mut pts: Vec<SmPoint> = table.to_vec();
    pts.sort_by(|a, b| a.share.total_cmp(&b.share));
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if share <= first.share {
        return first.multiplier;
    }
    if share >= last.share {
        return last.multiplier;
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if share >= a.share && share <= b.share {
            let span = b.share - a.share;
            if span <= 0.0 {
                return a.multiplier;
            }
            let t = (share - a.share) / span;
            return a.multiplier + t * (b.multiplier - a.multiplier);
        }
    }
    last.multiplier
}

fn check_positive(label: &str, v: u32) -> Result<(), PerfError> {
    if v == 0 {
        return Err(PerfError::InvalidArgument(format!("{label} must be >= 1")));
    }
    Ok(())
}

/// Per-batch latency of one replica in seconds.
pub fn op_latency(
    profile: &OperatorProfile,
    phase: Phase,
    batch: u32,
    tokens: u32,
    parallelism: u32,
    sm_share: f64,
) -> Result<f64, PerfError> {
    check_positive("batch", batch)?;
    check_positive("seq_len", tokens)?;
    check_positive("parallelism", parallelism)?;
    if !(sm_share > 0.0 && sm_share <= 1.0) {
        return Err(PerfError::InvalidArgument(format!(
            "sm_share must lie in (0, 1], got {sm_share}"
        )));
    }
    // The profile name is not known here; callers with a name use ProfileSet::latency.
    let model = profile.phase_model(phase).ok_or_else(|| PerfError::UnknownPhase {
        profile: String::from("<anonymous>"),
        phase,
    })?;
    let base = model.eval(batch, tokens) / (profile.eta * f64::from(parallelism));
    Ok(base * profile.sm_slowdown(sm_share, batch, tokens))
}

/// Bytes held by one shard: `weight/P + m0 + m1·B·L`.
pub fn op_memory(profile: &OperatorProfile, batch: u32, tokens: u32, parallelism: u32) -> f64 {
    let p = f64::from(parallelism.max(1));
    profile.weight_mem / p + profile.m0 + profile.m1 * f64::from(batch) * f64::from(tokens)
}

/// Transfer time of the operator's output for one batch.
pub fn comm_time(profile: &OperatorProfile, batch: u32, tokens: u32, bandwidth: f64) -> f64 {
    debug_assert!(bandwidth > 0.0);
    let volume = profile.v0 + profile.v1 * f64::from(batch) * f64::from(tokens);
    volume / bandwidth
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceParams {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
}

fn default_theta() -> f64 {
    0.5
}

fn default_exponent() -> f64 {
    1.0
}

impl Default for InterferenceParams {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            exponent: default_exponent(),
        }
    }
}

/// Hinge penalty on SM oversubscription: `1 + θ·max(0, load + adding − 1)^k`.
pub fn interference_factor(device_load: f64, adding: f64, params: &InterferenceParams) -> f64 {
    let over = (device_load + adding - 1.0).max(0.0);
    if over <= 0.0 || params.theta <= 0.0 {
        return 1.0;
    }
    1.0 + params.theta * over.powf(params.exponent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub profiles: BTreeMap<String, OperatorProfile>,
    #[serde(default = "default_bandwidth")]
    pub link_bandwidth: f64,
    #[serde(default)]
    pub interference: InterferenceParams,
}

fn default_bandwidth() -> f64 {
    DEFAULT_LINK_BANDWIDTH
}

/// Profile files may be a bare `name → profile` map or the wrapped form
/// carrying bandwidth and interference settings.
#[derive(Deserialize)]
#[serde(untagged)]
enum ProfileFile {
    Wrapped(ProfileSet),
    Bare(BTreeMap<String, OperatorProfile>),
}

impl ProfileSet {
    pub fn new(profiles: BTreeMap<String, OperatorProfile>) -> Self {
        Self {
            profiles,
            link_bandwidth: DEFAULT_LINK_BANDWIDTH,
            interference: InterferenceParams::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PerfError> {
        let file: ProfileFile =
            serde_json::from_str(text).map_err(|e| PerfError::Parse(e.to_string()))?;
        let set = match file {
            ProfileFile::Wrapped(set) => set,
            ProfileFile::Bare(map) => ProfileSet::new(map),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PerfError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PerfError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile set serializes")
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if !(self.link_bandwidth.is_finite() && self.link_bandwidth > 0.0) {
            return Err(PerfError::InvalidArgument(format!(
                "link_bandwidth must be positive, got {}",
                self.link_bandwidth
            )));
        }
        if self.interference.theta.is_nan() || self.interference.theta < 0.0 {
            return Err(PerfError::InvalidArgument("interference theta must be >= 0".into()));
        }
        for (name, p) in &self.profiles {
            p.validate(name)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&OperatorProfile, PerfError> {
        self.profiles
            .get(name)
            .ok_or_else(|| PerfError::UnknownProfile(name.to_string()))
    }

    /// [`op_latency`] with the profile resolved by name, so errors carry it.
    pub fn latency(
        &self,
        name: &str,
        phase: Phase,
        batch: u32,
        tokens: u32,
        parallelism: u32,
        sm_share: f64,
    ) -> Result<f64, PerfError> {
        let profile = self.get(name)?;
        op_latency(profile, phase, batch, tokens, parallelism, sm_share).map_err(|e| match e {
            PerfError::UnknownPhase { phase, .. } => PerfError::UnknownPhase {
                profile: name.to_string(),
                phase,
            },
            other => other,
        })
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn profile() -> impl Strategy<Value = OperatorProfile> {
        (0.0f64..1e-3, 0.0f64..1e-6, 0.0f64..1e-9, 0.0f64..1.0, 0.0f64..1e-4, 0.5f64..1.0, any::<bool>()).prop_map(
            |(c0, c1, c2, s0, s1, eta, attn)| OperatorProfile {
                kind: if attn { OperatorKind::Attention } else { OperatorKind::Linear },
                prefill: Some(LatencyModel::new(c0 + 1e-9, c1, if attn { c2 } else { 0.0 })),
                s0,
                s1,
                eta,
                ..Default::default()
            },
        )
    }

    proptest! {
        #[test]
        fn latency_is_monotone(
            p in profile(),
            b in 1u32..64, l in 1u32..8192, par in 1u32..8, share in 0.05f64..1.0,
            db in 0u32..8, dl in 0u32..1024, dp in 0u32..4, ds in 0.0f64..0.5,
        ) {
            let t = |b, l, par, s| op_latency(&p, Phase::Prefill, b, l, par, s).unwrap();
            let base = t(b, l, par, share);
            prop_assert!(t(b + db, l, par, share) >= base);
            prop_assert!(t(b, l + dl, par, share) >= base);
            prop_assert!(t(b, l, par + dp, share) <= base);
            prop_assert!(t(b, l, par, (share + ds).min(1.0)) <= base);
        }

        #[test]
        fn interference_is_a_hinge(load in 0.0f64..2.0, adding in 0.0f64..1.0, theta in 0.0f64..3.0) {
            let params = InterferenceParams { theta, exponent: 1.0 };
            let f = interference_factor(load, adding, &params);
            prop_assert!(f >= 1.0);
            if load + adding <= 1.0 {
                prop_assert_eq!(f, 1.0);
            } else {
                prop_assert!((f - (1.0 + theta * (load + adding - 1.0))).abs() < 1e-12);
            }
        }
    }
}
