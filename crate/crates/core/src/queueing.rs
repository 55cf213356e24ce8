// SPDX-License-Identifier: Apache-2.0

//! M/M/R operator queues.
//!
//! Each operator is a multi-replica FIFO queue fed by batches arriving at
//! `λ = qps / B` and served at `μ = 1 / (op_latency · layer_count)` per
//! replica. Stability is the strict condition `λ < R·μ`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("unstable queue: arrival rate {lambda} >= capacity {capacity}")]
    Unstable { lambda: f64, capacity: f64 },
    #[error("domain error: {0}")]
    DomainError(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueOperatingPoint {
    /// Batches per second.
    pub lambda: f64,
    /// Services per second per replica.
    pub mu: f64,
    pub replicas: u32,
}

impl QueueOperatingPoint {
    pub fn new(lambda: f64, mu: f64, replicas: u32) -> Self {
        Self { lambda, mu, replicas }
    }

    pub fn utilization(&self) -> f64 {
        self.lambda / (f64::from(self.replicas) * self.mu)
    }

    pub fn is_stable(&self) -> bool {
        self.lambda < f64::from(self.replicas) * self.mu
    }

    fn check(&self) -> Result<(), QueueError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(QueueError::DomainError(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(QueueError::DomainError(format!("mu must be positive, got {}", self.mu)));
        }
        if self.replicas == 0 {
            return Err(QueueError::DomainError("replicas must be >= 1".into()));
        }
        if !self.is_stable() {
            return Err(QueueError::Unstable {
                lambda: self.lambda,
                capacity: f64::from(self.replicas) * self.mu,
            });
        }
        Ok(())
    }
}

/// Probability that an arrival waits, for `replicas` servers at per-server
/// utilization `rho`.
///
/// Uses the Erlang-B recurrence `B(k) = a·B(k−1) / (k + a·B(k−1))`, then
/// `C = R·B / (R − a·(1 − B))` with offered load `a = R·ρ`.
pub fn erlang_c(replicas: u32, rho: f64) -> Result<f64, QueueError> {
    if replicas == 0 {
        return Err(QueueError::DomainError("replicas must be >= 1".into()));
    }
    if rho.is_nan() || rho <= 0.0 {
        return Err(QueueError::DomainError(format!("rho must be positive, got {rho}")));
    }
    let r = f64::from(replicas);
    if rho >= 1.0 {
        return Err(QueueError::Unstable { lambda: rho * r, capacity: r });
    }
    let a = r * rho;
    let mut b = 1.0;
    for k in 1..=replicas {
        b = a * b / (f64::from(k) + a * b);
    }
    Ok(r * b / (r - a * (1.0 - b)))
}

/// Mean time a batch spends waiting for a free replica.
pub fn expected_wait(pt: &QueueOperatingPoint) -> Result<f64, QueueError> {
    pt.check()?;
    let c = erlang_c(pt.replicas, pt.utilization())?;
    Ok(c / (f64::from(pt.replicas) * pt.mu - pt.lambda))
}

/// Smallest `R` with `λ < R·μ`.
pub fn min_replicas_stable(lambda: f64, mu: f64) -> u32 {
    debug_assert!(lambda >= 0.0 && mu > 0.0);
    let ratio = lambda / mu;
    let mut r = if ratio.is_finite() && ratio < f64::from(u32::MAX - 1) {
        (ratio.floor() as u32).saturating_add(1)
    } else {
        u32::MAX
    };
    while r < u32::MAX && lambda >= f64::from(r) * mu {
        r += 1;
    }
    while r > 1 && lambda < f64::from(r - 1) * mu {
        r -= 1;
    }
    r.max(1)
}

/// Smallest `R` whose expected wait is at most `w_max`.
pub fn min_replicas_for_wait(lambda: f64, mu: f64, w_max: f64) -> u32 {
    let mut r = min_replicas_stable(lambda, mu);
    if w_max.is_infinite() || lambda <= 0.0 {
        return r;
    }
    loop {
        let w = expected_wait(&QueueOperatingPoint::new(lambda, mu, r))
            .expect("replica count above the stability bound");
        if w <= w_max || r == u32::MAX {
            return r;
        }
        r += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FreeAt(f64);

impl Eq for FreeAt {}

impl PartialOrd for FreeAt {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FreeAt {
    // reversed: BinaryHeap pops the earliest free time first
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0)
    }
}

/// Simulates a FIFO M/M/R queue and returns the empirical mean wait.
///
/// Each arrival takes the earliest-free replica, which reproduces FIFO
/// multi-server order exactly. Deterministic for a given seed.
pub fn des_oracle(
    lambda: f64,
    mu: f64,
    replicas: u32,
    n_arrivals: u64,
    seed: u64,
) -> Result<f64, QueueError> {
    QueueOperatingPoint::new(lambda, mu, replicas).check()?;
    if n_arrivals == 0 {
        return Err(QueueError::DomainError("n_arrivals must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inter = Exp::new(lambda).map_err(|e| QueueError::DomainError(e.to_string()))?;
    let service = Exp::new(mu).map_err(|e| QueueError::DomainError(e.to_string()))?;

    let mut servers: BinaryHeap<FreeAt> = (0..replicas).map(|_| FreeAt(0.0)).collect();
    let mut now = 0.0f64;
    let mut total_wait = 0.0f64;
    for _ in 0..n_arrivals {
        now += inter.sample(&mut rng);
        let FreeAt(free) = servers.pop().expect("at least one replica");
        let start = now.max(free);
        total_wait += start - now;
        servers.push(FreeAt(start + service.sample(&mut rng)));
    }
    Ok(total_wait / n_arrivals as f64)
}
