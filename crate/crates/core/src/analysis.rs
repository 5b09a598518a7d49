//! Post-hoc checks over a run's operation and snapshot records.
//!
//! Everything here is a pure function of the records, so re-running a check
//! on the same trace always gives the same report.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::protocol::OpKind;
use crate::quorum::{self, SystemParams};
use crate::trace::{OpRecord, Snapshot};
use crate::types::{NodeId, ObjectValue, Tag, Versioned};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("op {op_id}: {reason}")]
    Malformed { op_id: u64, reason: String },
}

fn malformed(op: &OpRecord, reason: &str) -> AnalysisError {
    AnalysisError::Malformed { op_id: op.op_id, reason: reason.to_string() }
}

/// Three standard deviations of a binomial proportion with success
/// probability `p` over `trials` trials.
pub fn three_sigma(p: f64, trials: u64) -> f64 {
    if trials == 0 {
        return f64::INFINITY;
    }
    3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

/// Largest acceptable observed failure rate for a claimed failure
/// probability `bound` over `trials` trials. The 3σ allowance is only granted
/// when the sample is big enough for it to be a margin (σ < bound/3);
/// smaller samples are held to the bound itself.
pub fn rate_threshold(bound: f64, trials: u64) -> f64 {
    if is_sized(bound, trials) {
        bound + three_sigma(bound, trials)
    } else {
        bound
    }
}

/// Whether `trials` is enough for a 3σ band around `bound` to be narrower
/// than the bound itself.
pub fn is_sized(bound: f64, trials: u64) -> bool {
    three_sigma(bound, trials) < bound
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomicityReport {
    pub total_ops: u64,
    pub completed_ops: u64,
    /// Timed out or lost their client; outside the order, reported only.
    pub unsuccessful_ops: u64,
    pub violations_ordering: u64,
    pub violations_return: u64,
    /// Ops with at least one violation of either kind.
    pub violating_ops: u64,
    pub write_tag_collisions: u64,
    pub violation_rate: f64,
    pub violating_op_ids: Vec<u64>,
}

/// Position of an op in the tag order: by tag, writes before reads.
fn order_key(op: &OpRecord, pair: &Versioned) -> (Tag, u8) {
    (pair.tag, if op.kind == OpKind::Write { 0 } else { 1 })
}

/// Checks a run against the ordering, return-value and unique-tag
/// properties of probabilistic atomicity.
///
/// An op that completed after another one started is never compared with it.
/// A read returning a pair that no write produced (other than the initial
/// one) counts as a return violation, as does a read whose tag is older than
/// the newest write completed before it began.
pub fn check_atomicity(ops: &[OpRecord]) -> Result<AtomicityReport, AnalysisError> {
    let mut seen_ids = HashSet::new();
    for op in ops {
        if !seen_ids.insert(op.op_id) {
            return Err(malformed(op, "duplicate op id"));
        }
        if op.is_completed() {
            if op.t_respond <= op.t_invoke {
                return Err(malformed(op, "completed op responds before it was invoked"));
            }
            if op.op_pair().is_none() {
                return Err(malformed(op, "completed op has no pair"));
            }
        }
    }

    let completed: Vec<&OpRecord> = ops.iter().filter(|o| o.is_completed()).collect();
    let mut report = AtomicityReport {
        total_ops: ops.len() as u64,
        completed_ops: completed.len() as u64,
        unsuccessful_ops: (ops.len() - completed.len()) as u64,
        ..Default::default()
    };

    // Every pair a write tried to install, finished or not.
    let mut written: HashMap<Tag, &Versioned> = HashMap::new();
    for op in ops.iter().filter(|o| o.kind == OpKind::Write) {
        if let Some(p) = &op.propagated {
            if written.insert(p.tag, p).is_some() {
                report.write_tag_collisions += 1;
            }
        }
    }

    let mut by_respond: Vec<&OpRecord> = completed.clone();
    by_respond.sort_by(|a, b| a.t_respond.total_cmp(&b.t_respond));
    let mut by_invoke: Vec<&OpRecord> = completed.clone();
    by_invoke.sort_by(|a, b| a.t_invoke.total_cmp(&b.t_invoke));

    let initial = Versioned::new(ObjectValue::initial(), Tag::INITIAL);
    let mut violating: BTreeSet<u64> = BTreeSet::new();
    let mut max_key: Option<(Tag, u8)> = None;
    let mut max_write_tag: Option<Tag> = None;
    let mut j = 0;
    for op in by_invoke {
        while j < by_respond.len() && by_respond[j].t_respond < op.t_invoke {
            let done = by_respond[j];
            let pair = done.op_pair().expect("checked above");
            let key = order_key(done, pair);
            max_key = max_key.max(Some(key));
            if done.kind == OpKind::Write {
                max_write_tag = max_write_tag.max(Some(pair.tag));
            }
            j += 1;
        }
        let pair = op.op_pair().expect("checked above");
        if max_key.is_some_and(|m| order_key(op, pair) < m) {
            report.violations_ordering += 1;
            violating.insert(op.op_id);
        }
        if op.kind == OpKind::Read {
            let stale = max_write_tag.is_some_and(|t| pair.tag < t);
            let known = *pair == initial || written.get(&pair.tag).is_some_and(|w| **w == *pair);
            if stale || !known {
                report.violations_return += 1;
                violating.insert(op.op_id);
            }
        }
    }

    report.violating_ops = violating.len() as u64;
    report.violating_op_ids = violating.into_iter().collect();
    report.violation_rate =
        if report.completed_ops == 0 { 0.0 } else { report.violating_ops as f64 / report.completed_ops as f64 };
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntersectionEstimate {
    pub pairs: u64,
    pub intersecting: u64,
    pub fraction: f64,
    /// Fewer than [`MIN_PAIRS`] qualifying pairs.
    pub low_confidence: bool,
}

pub const MIN_PAIRS: u64 = 30;

struct Phase<'a> {
    op: u64,
    start: f64,
    set: &'a BTreeSet<NodeId>,
}

fn intersects(a: &BTreeSet<NodeId>, b: &BTreeSet<NodeId>) -> bool {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().any(|x| large.contains(x))
}

fn phases(ops: &[OpRecord]) -> (Vec<Phase<'_>>, Vec<Phase<'_>>) {
    let mut props = Vec::new();
    let mut cons = Vec::new();
    for op in ops.iter().filter(|o| o.is_completed()) {
        if let Some(start) = op.t_consult_start {
            cons.push(Phase { op: op.op_id, start, set: &op.consult_responders });
        }
        if let Some(start) = op.t_prop_start {
            props.push(Phase { op: op.op_id, start, set: &op.prop_responders });
        }
    }
    props.sort_by(|a, b| a.start.total_cmp(&b.start));
    cons.sort_by(|a, b| a.start.total_cmp(&b.start));
    (props, cons)
}

fn estimate(pairs: u64, intersecting: u64) -> IntersectionEstimate {
    IntersectionEstimate {
        pairs,
        intersecting,
        fraction: if pairs == 0 { 0.0 } else { intersecting as f64 / pairs as f64 },
        low_confidence: pairs < MIN_PAIRS,
    }
}

/// Fraction of (propagation, consultation) pairs of distinct completed ops,
/// started at most `delta` apart, whose responder sets share a node.
pub fn estimate_intersection(ops: &[OpRecord], delta: f64) -> IntersectionEstimate {
    let (props, cons) = phases(ops);
    let (mut pairs, mut hits) = (0, 0);
    for p in &props {
        let lo = cons.partition_point(|c| c.start < p.start - delta);
        for c in cons[lo..].iter().take_while(|c| c.start <= p.start + delta) {
            if c.op == p.op {
                continue;
            }
            pairs += 1;
            hits += intersects(p.set, c.set) as u64;
        }
    }
    estimate(pairs, hits)
}

/// Same estimate for consultations started more than `min_gap` after a
/// propagation, with no other propagation started in between. Shows how
/// intersection decays once the timing window is exceeded.
pub fn estimate_decayed_intersection(ops: &[OpRecord], min_gap: f64) -> IntersectionEstimate {
    let (props, cons) = phases(ops);
    let (mut pairs, mut hits) = (0, 0);
    for c in &cons {
        // Latest propagation started before this consultation.
        let idx = props.partition_point(|p| p.start < c.start);
        let Some(p) = idx.checked_sub(1).map(|i| &props[i]) else { continue };
        if c.start - p.start <= min_gap || c.op == p.op {
            continue;
        }
        pairs += 1;
        hits += intersects(p.set, c.set) as u64;
    }
    estimate(pairs, hits)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexityStats {
    pub ops: u64,
    pub mean_distinct_contacts: f64,
    pub mean_max_depth: f64,
    pub max_depth: u32,
    pub mean_latency: f64,
    /// Mean latency over ops that never re-sent a phase.
    pub mean_latency_no_retry: f64,
    pub ops_with_retries: u64,
    /// Smallest responder set seen in any completed phase.
    pub min_phase_responders: u64,
    /// Two phases of `q` nodes each.
    pub contacts_comparator: f64,
    /// Two full trees.
    pub contacts_ceiling: f64,
    /// Two phases of fan-out depth plus the response hop.
    pub latency_comparator: f64,
}

pub fn complexity_stats(ops: &[OpRecord], q: u64, k: u64) -> ComplexityStats {
    let depth = quorum::dissemination_depth(q, k);
    let tree = quorum::tree_size(k, depth) as f64;
    let done: Vec<&OpRecord> = ops.iter().filter(|o| o.is_completed()).collect();
    let mean = |f: &dyn Fn(&OpRecord) -> f64, set: &[&OpRecord]| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|o| f(o)).sum::<f64>() / set.len() as f64
        }
    };
    let clean: Vec<&OpRecord> = done.iter().copied().filter(|o| o.retries == 0).collect();
    ComplexityStats {
        ops: done.len() as u64,
        mean_distinct_contacts: mean(&|o| o.distinct_contacts as f64, &done),
        mean_max_depth: mean(&|o| o.max_depth as f64, &done),
        max_depth: done.iter().map(|o| o.max_depth).max().unwrap_or(0),
        mean_latency: mean(&|o| o.latency(), &done),
        mean_latency_no_retry: mean(&|o| o.latency(), &clean),
        ops_with_retries: (done.len() - clean.len()) as u64,
        min_phase_responders: done
            .iter()
            .flat_map(|o| [o.consult_responders.len(), o.prop_responders.len()])
            .min()
            .unwrap_or(0) as u64,
        contacts_comparator: 2.0 * q as f64,
        contacts_ceiling: 2.0 * tree,
        latency_comparator: 2.0 * depth as f64 + 2.0,
    }
}

/// Fraction of snapshots taken at or after `since` whose up-to-date count
/// reaches `floor`. An empty selection yields 1.
pub fn uptodate_floor_check(snapshots: &[Snapshot], floor: f64, since: f64) -> f64 {
    let window: Vec<&Snapshot> = snapshots.iter().filter(|s| s.t >= since).collect();
    if window.is_empty() {
        return 1.0;
    }
    window.iter().filter(|s| s.uptodate_count as f64 >= floor).count() as f64 / window.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Informational rows are shown but never fail the check.
    pub asserted: bool,
}

/// What the trace is checked against. `params` is optional: without it only
/// the parameter-free checks and the `beta` bound are available.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOptions {
    pub beta: f64,
    pub delta: f64,
    pub params: Option<SystemParams>,
    /// Assert the up-to-date floor; only meaningful when writes arrive at
    /// least every `delta`.
    pub assert_floor: bool,
    pub floor_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub atomicity: AtomicityReport,
    pub bound: f64,
    pub intersection: IntersectionEstimate,
    pub complexity: Option<ComplexityStats>,
    pub uptodate_fraction: Option<f64>,
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.asserted)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| c.asserted && !c.passed).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let a = &self.atomicity;
        let _ = writeln!(out, "ops: {} total, {} completed, {} unsuccessful", a.total_ops, a.completed_ops, a.unsuccessful_ops);
        let _ = writeln!(out, "ordering violations: {}", a.violations_ordering);
        let _ = writeln!(out, "return violations: {}", a.violations_return);
        let _ = writeln!(out, "write tag collisions: {}", a.write_tag_collisions);
        let _ = writeln!(out, "{:<28} {:>12} {:>12}  result", "check", "value", "threshold");
        for c in &self.checks {
            let verdict = match (c.asserted, c.passed) {
                (false, _) => "info",
                (true, true) => "pass",
                (true, false) => "FAIL",
            };
            let _ = writeln!(out, "{:<28} {:>12.6} {:>12.6}  {verdict}", c.name, c.value, c.threshold);
        }
        out
    }
}

/// Runs every applicable check over one run.
pub fn check_trace(
    ops: &[OpRecord],
    snapshots: &[Snapshot],
    opts: &CheckOptions,
) -> Result<CheckReport, AnalysisError> {
    let atomicity = check_atomicity(ops)?;
    let bound = (-opts.beta * opts.beta).exp();
    let q = opts.params.as_ref().and_then(|p| quorum::quorum_size(p).ok());
    let full_quorum = matches!((q, &opts.params), (Some(q), Some(p)) if q >= p.n);

    let mut checks = vec![CheckOutcome {
        name: "write_tag_collisions".into(),
        value: atomicity.write_tag_collisions as f64,
        threshold: 0.0,
        passed: atomicity.write_tag_collisions == 0,
        asserted: true,
    }];
    let rate_limit = if full_quorum { 0.0 } else { rate_threshold(bound, atomicity.completed_ops) };
    checks.push(CheckOutcome {
        name: "violation_rate".into(),
        value: atomicity.violation_rate,
        threshold: rate_limit,
        passed: atomicity.violation_rate <= rate_limit,
        asserted: true,
    });

    let intersection = estimate_intersection(ops, opts.delta);
    let miss_limit = if full_quorum { 0.0 } else { rate_threshold(bound, intersection.pairs) };
    checks.push(CheckOutcome {
        name: "intersection_fraction".into(),
        value: intersection.fraction,
        threshold: 1.0 - miss_limit,
        passed: intersection.fraction >= 1.0 - miss_limit,
        // Too few pairs to tell a miss rate near the bound from one above it.
        asserted: !intersection.low_confidence && (full_quorum || is_sized(bound, intersection.pairs)),
    });

    let complexity = match (&opts.params, q) {
        (Some(p), Some(q)) => Some(complexity_stats(ops, q, p.k)),
        _ => None,
    };
    if let (Some(stats), Some(q)) = (&complexity, q) {
        checks.push(CheckOutcome {
            name: "min_phase_responders".into(),
            value: stats.min_phase_responders as f64,
            threshold: q as f64,
            passed: stats.ops == 0 || stats.min_phase_responders >= q,
            asserted: true,
        });
    }

    let uptodate_fraction = match (&opts.params, q) {
        (Some(p), Some(q)) if !snapshots.is_empty() => {
            let floor = quorum::min_uptodate_replicas(q as f64, p.c, p.delta);
            Some(uptodate_floor_check(snapshots, floor, 0.0))
        }
        _ => None,
    };
    if let Some(frac) = uptodate_fraction {
        checks.push(CheckOutcome {
            name: "uptodate_floor_fraction".into(),
            value: frac,
            threshold: opts.floor_fraction,
            passed: frac >= opts.floor_fraction,
            asserted: opts.assert_floor,
        });
    }

    Ok(CheckReport { atomicity, bound, intersection, complexity, uptodate_fraction, checks })
}
