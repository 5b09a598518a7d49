//! Experiment configuration. A config plus its seed fully determines a run.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::membership::MembershipMode;
use crate::protocol::{PropAdoption, ProtocolParams};
use crate::quorum::{self, QuorumError, SystemParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read configuration: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-message delay distribution, in time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    Fixed { d: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Fixed { d: 1.0 }
    }
}

impl DelayModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayModel::Fixed { d } => d,
            DelayModel::Uniform { lo, hi } if lo == hi => lo,
            DelayModel::Uniform { lo, hi } => rng.random_range(lo..=hi),
            DelayModel::Exponential { mean } => Exp::new(1.0 / mean).expect("positive mean").sample(rng),
        }
    }

    /// Per-hop delay used to size phase-time bounds. Exponential delays are
    /// unbounded; three means covers ~95% of hops.
    pub fn hop_bound(&self) -> f64 {
        match *self {
            DelayModel::Fixed { d } => d,
            DelayModel::Uniform { hi, .. } => hi,
            DelayModel::Exponential { mean } => 3.0 * mean,
        }
    }

    fn violations(&self) -> Vec<String> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        match *self {
            DelayModel::Fixed { d } if !ok(d) => vec![format!("message_delay.d must be >= 0, got {d}")],
            DelayModel::Uniform { lo, hi } if !(ok(lo) && ok(hi) && lo <= hi) => {
                vec![format!("message_delay needs 0 <= lo <= hi, got [{lo}, {hi}]")]
            }
            DelayModel::Exponential { mean } if !(mean > 0.0 && mean.is_finite()) => {
                vec![format!("message_delay.mean must be positive, got {mean}")]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpPattern {
    /// Write, read, write, read, ...
    #[default]
    WriteRead,
    Reads,
    Writes,
}

/// Operation arrival process. Clients are drawn uniformly among live nodes
/// with no operation in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    #[default]
    None,
    /// `ops` operations one after another, each starting `gap` time units
    /// after the previous one ended.
    Sequential {
        ops: usize,
        #[serde(default)]
        gap: f64,
        #[serde(default)]
        pattern: OpPattern,
    },
    /// A write every `write_period` from time 0, plus Poisson reads at
    /// `read_rate` per time unit.
    Periodic { write_period: f64, read_rate: f64 },
    /// `ops` operations started at uniform times in `[0, spread]`.
    Random { ops: usize, write_fraction: f64, spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembershipConfig {
    pub mode: MembershipMode,
    pub view_size: usize,
    pub shuffle_period: f64,
    /// Cycles after which an unrefreshed entry is evicted. Defaults to `view_size`.
    pub age_limit: Option<u32>,
    pub bootstrap_fanout: usize,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        MembershipConfig {
            mode: MembershipMode::Perfect,
            view_size: 20,
            shuffle_period: 1.0,
            age_limit: None,
            bootstrap_fanout: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ProtocolConfig {
    pub prop_adoption_mode: PropAdoption,
    /// Defaults to `4 ℓ k`.
    pub dup_hop_cap: Option<u32>,
    /// Defaults to twice the phase-time bound.
    pub phase_retry_period: Option<f64>,
    /// Defaults to twenty times the phase-time bound.
    pub op_timeout: Option<f64>,
}

fn default_period() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub params: SystemParams,
    #[serde(default)]
    pub message_delay: DelayModel,
    #[serde(default = "default_period")]
    pub churn_period: f64,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    #[serde(default)]
    pub membership: MembershipConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    /// Nodes holding the default value at time 0. Defaults to `q`.
    #[serde(default)]
    pub initial_holders: Option<u64>,
    #[serde(default = "default_period")]
    pub snapshot_period: f64,
    #[serde(default)]
    pub record_messages: bool,
    /// End the run as soon as the workload is spent and the network is idle.
    #[serde(default = "default_true")]
    pub stop_when_quiescent: bool,
}

/// Values derived from a config once it has been validated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub protocol: ProtocolParams,
    pub phase_bound: f64,
    pub retry_period: f64,
    pub op_timeout: f64,
    pub initial_holders: u64,
    pub age_limit: u32,
    /// Fraction of the population replaced at each churn tick.
    pub churn_per_tick: f64,
}

impl ExperimentConfig {
    pub fn new(params: SystemParams, duration: f64) -> Self {
        ExperimentConfig {
            params,
            message_delay: DelayModel::default(),
            churn_period: 1.0,
            workload: Workload::None,
            seed: 0,
            duration,
            membership: MembershipConfig::default(),
            protocol: ProtocolConfig::default(),
            initial_holders: None,
            snapshot_period: 1.0,
            record_messages: false,
            stop_when_quiescent: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form. Covers the seed, so equal
    /// digests mean equal runs.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Validates everything and derives the run constants. All violations are
    /// reported together.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut errs = self.params.violations();
        let q = if errs.is_empty() {
            match quorum::quorum_size(&self.params) {
                Ok(q) => Some(q),
                Err(QuorumError::QuorumExceedsPopulation { q, n }) => {
                    errs.push(format!("q exceeds n: quorum size {q} is larger than the population {n}"));
                    None
                }
                Err(e) => {
                    errs.push(e.to_string());
                    None
                }
            }
        } else {
            None
        };
        errs.extend(self.message_delay.violations());
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.churn_period) {
            errs.push(format!("churn_period must be positive, got {}", self.churn_period));
        }
        if !positive(self.snapshot_period) {
            errs.push(format!("snapshot_period must be positive, got {}", self.snapshot_period));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            errs.push(format!("duration must be >= 0, got {}", self.duration));
        }
        let m = &self.membership;
        if !positive(m.shuffle_period) {
            errs.push(format!("membership.shuffle_period must be positive, got {}", m.shuffle_period));
        }
        if m.mode == MembershipMode::Cyclon {
            if (m.view_size as u64) < self.params.k + 1 {
                errs.push(format!("membership.view_size must be at least k+1 = {}, got {}", self.params.k + 1, m.view_size));
            }
            if m.bootstrap_fanout == 0 {
                errs.push("membership.bootstrap_fanout must be at least 1".to_owned());
            }
        }
        if let Some(t) = self.protocol.phase_retry_period {
            if !positive(t) {
                errs.push(format!("protocol.phase_retry_period must be positive, got {t}"));
            }
        }
        if let Some(t) = self.protocol.op_timeout {
            if !positive(t) {
                errs.push(format!("protocol.op_timeout must be positive, got {t}"));
            }
        }

        let depth = q.map(|q| quorum::dissemination_depth(q, self.params.k)).unwrap_or(0);
        let phase_bound = (depth as f64 + 1.0) * self.message_delay.hop_bound();

        match &self.workload {
            Workload::None => {}
            Workload::Sequential { gap, .. } => {
                if !(*gap >= 0.0 && gap.is_finite()) {
                    errs.push(format!("workload.gap must be >= 0, got {gap}"));
                }
            }
            Workload::Periodic { write_period, read_rate } => {
                if !positive(*write_period) {
                    errs.push(format!("workload.write_period must be positive, got {write_period}"));
                } else if *write_period > self.params.delta - phase_bound {
                    errs.push(format!(
                        "workload.write_period {write_period} exceeds delta - phase bound = {} - {phase_bound}",
                        self.params.delta
                    ));
                }
                if !(*read_rate >= 0.0 && read_rate.is_finite()) {
                    errs.push(format!("workload.read_rate must be >= 0, got {read_rate}"));
                }
            }
            Workload::Random { write_fraction, spread, .. } => {
                if !(0.0..=1.0).contains(write_fraction) {
                    errs.push(format!("workload.write_fraction must lie in [0, 1], got {write_fraction}"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    errs.push(format!("workload.spread must be >= 0, got {spread}"));
                }
            }
        }

        let initial_holders = self.initial_holders.or(q).unwrap_or(0);
        if let Some(q) = q {
            if initial_holders < q {
                errs.push(format!("initial_holders {initial_holders} is below the quorum size {q}"));
            }
            if initial_holders > self.params.n {
                errs.push(format!("initial_holders {initial_holders} exceeds n = {}", self.params.n));
            }
        }

        if !errs.is_empty() {
            return Err(ConfigError::Invalid(errs));
        }
        let q = q.expect("validated");
        let fanout = self.params.k as usize;
        Ok(Resolved {
            protocol: ProtocolParams {
                quorum: q as usize,
                depth,
                fanout,
                adoption: self.protocol.prop_adoption_mode,
                dup_hop_cap: self
                    .protocol
                    .dup_hop_cap
                    .unwrap_or_else(|| ProtocolParams::default_dup_hop_cap(depth, fanout)),
            },
            phase_bound,
            retry_period: self.protocol.phase_retry_period.unwrap_or(2.0 * phase_bound.max(1e-9)),
            op_timeout: self.protocol.op_timeout.unwrap_or(20.0 * phase_bound.max(1e-9)),
            initial_holders,
            age_limit: m.age_limit.unwrap_or(m.view_size as u32),
            churn_per_tick: 1.0 - (1.0 - self.params.c).powf(self.churn_period),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::new(SystemParams { n: 100, c: 0.0, delta: 10.0, beta: 1.0, k: 3 }, 10.0)
    }

    #[test]
    fn defaults_resolve() {
        let r = base().resolve().unwrap();
        assert_eq!(r.protocol.quorum, 10);
        assert_eq!(r.protocol.depth, 2);
        assert_eq!(r.initial_holders, 10);
        assert_eq!(r.protocol.dup_hop_cap, 24);
        assert_eq!(r.phase_bound, 3.0);
    }

    #[test]
    fn all_violations_listed() {
        let mut cfg = base();
        cfg.params.beta = 12.0;
        cfg.snapshot_period = 0.0;
        cfg.message_delay = DelayModel::Uniform { lo: 3.0, hi: 1.0 };
        let Err(ConfigError::Invalid(errs)) = cfg.resolve() else { panic!("accepted") };
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs[0].contains("q exceeds n"));
    }

    #[test]
    fn initial_holders_below_quorum_rejected() {
        let mut cfg = base();
        cfg.params.beta = 3.0;
        cfg.initial_holders = Some(10);
        let err = cfg.resolve().unwrap_err().to_string();
        assert!(err.contains("below the quorum size 30"), "{err}");
    }

    #[test]
    fn periodic_writes_must_fit_in_delta() {
        let mut cfg = base();
        cfg.params.delta = 20.0;
        cfg.workload = Workload::Periodic { write_period: 18.0, read_rate: 0.1 };
        assert!(cfg.resolve().is_err());
        cfg.workload = Workload::Periodic { write_period: 10.0, read_rate: 0.1 };
        assert!(cfg.resolve().is_ok());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let text = r#"{
            "params": {"n": 64, "c": 0.01, "delta": 10, "beta": 1.5, "k": 2},
            "duration": 50,
            "seed": 3,
            "workload": {"kind": "sequential", "ops": 4},
            "membership": {"mode": "cyclon"}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.workload, Workload::Sequential { ops: 4, gap: 0.0, pattern: OpPattern::WriteRead });
        assert_eq!(cfg.membership.view_size, 20);
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
