//! Closed-form quantities: quorum size, dissemination tree shape, churn
//! survival and the consultation miss bound.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuorumError {
    #[error("q exceeds n: quorum size {q} is larger than the population {n}")]
    QuorumExceedsPopulation { q: u64, n: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// System parameters that fix the quorum size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Population size.
    pub n: u64,
    /// Fraction of the population replaced per time unit.
    pub c: f64,
    /// Quorum lifetime, in time units.
    pub delta: f64,
    /// Confidence parameter; the per-operation miss bound is `exp(-beta^2)`.
    pub beta: f64,
    /// Dissemination fan-out.
    pub k: u64,
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), QuorumError> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(QuorumError::InvalidParams(errs.join("; ")))
        }
    }

    /// Every violated bound, for reporting all problems at once.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n < 1 {
            errs.push("n must be at least 1".to_owned());
        }
        if !(0.0..1.0).contains(&self.c) {
            errs.push(format!("c must lie in [0, 1), got {}", self.c));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            errs.push(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            errs.push(format!("beta must be positive, got {}", self.beta));
        }
        if self.k < 1 {
            errs.push("k must be at least 1".to_owned());
        }
        errs
    }
}

/// Un-rounded quorum size `beta * sqrt(n) / (1 - c)^(delta / 2)`.
pub fn quorum_size_exact(p: &SystemParams) -> f64 {
    p.beta * (p.n as f64).sqrt() / (1.0 - p.c).powf(p.delta / 2.0)
}

/// Quorum size, rounded up. Fails when it would exceed the population.
pub fn quorum_size(p: &SystemParams) -> Result<u64, QuorumError> {
    p.validate()?;
    let exact = quorum_size_exact(p);
    // Absorb float noise so an exact integer does not round up by one.
    let q = (exact * (1.0 - 1e-12)).ceil().max(1.0);
    if q > p.n as f64 {
        return Err(QuorumError::QuorumExceedsPopulation { q: q as u64, n: p.n });
    }
    Ok(q as u64)
}

/// Churn inflation factor `(1 - c)^(-delta)`.
pub fn d_factor(c: f64, delta: f64) -> f64 {
    (1.0 - c).powf(-delta)
}

/// Number of nodes in a balanced tree of depth `depth` where every inner node
/// has `k` children. For `k = 1` this is the chain length `depth + 1`.
/// Saturates at `u64::MAX`.
pub fn tree_size(k: u64, depth: u32) -> u64 {
    if k <= 1 {
        return depth as u64 + 1;
    }
    let mut total: u64 = 0;
    let mut level: u64 = 1;
    for _ in 0..=depth {
        total = total.saturating_add(level);
        level = level.saturating_mul(k);
    }
    total
}

/// Smallest depth whose tree holds at least `q` nodes.
pub fn dissemination_depth(q: u64, k: u64) -> u32 {
    let mut depth = 0;
    while tree_size(k, depth) < q {
        depth += 1;
    }
    depth
}

/// Fraction of an initial population replaced after `tau` time units of churn.
pub fn replaced_ratio(c: f64, tau: f64) -> f64 {
    1.0 - (1.0 - c).powf(tau)
}

/// Lower bound on live holders of an up-to-date value: `q (1 - c)^delta`.
pub fn min_uptodate_replicas(q: f64, c: f64, delta: f64) -> f64 {
    q * (1.0 - c).powf(delta)
}

/// Upper bound on the probability that a consultation of `q` uniform draws
/// misses every up-to-date replica: `exp(-(q^2 / n) (1 - c)^delta)`.
pub fn consultation_miss_bound(p: &SystemParams, q: f64) -> f64 {
    (-(q * q / p.n as f64) * (1.0 - p.c).powf(p.delta)).exp()
}

/// Every derived quantity for one parameter set, as printed by `calc`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Derived {
    pub q: u64,
    pub d: f64,
    pub depth: u32,
    pub tree_size: u64,
    pub miss_bound: f64,
    pub replica_floor: f64,
}

impl Derived {
    pub fn compute(p: &SystemParams) -> Result<Self, QuorumError> {
        let q = quorum_size(p)?;
        let depth = dissemination_depth(q, p.k);
        Ok(Derived {
            q,
            d: d_factor(p.c, p.delta),
            depth,
            tree_size: tree_size(p.k, depth),
            miss_bound: consultation_miss_bound(p, q as f64),
            replica_floor: min_uptodate_replicas(q as f64, p.c, p.delta),
        })
    }
}
