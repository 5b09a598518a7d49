use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::membership::PeerSampler;
use crate::protocol::{ClientOp, OpKind, Outbound, Participation, PhaseStart, Progress, ProtocolParams};
use crate::trace::{MessageRecord, OpRecord, OpStatus, RunSummary, Snapshot, TraceBundle};
use crate::types::{Envelope, NodeId, ObjectValue, PhaseKey, Tag, Versioned};

use super::config::{ConfigError, ExperimentConfig, OpPattern, Resolved, Workload};
use super::population::Population;

#[derive(Debug, Clone)]
enum EventKind {
    Deliver { to: NodeId, env: Envelope, sent_at: f64 },
    ChurnTick,
    MembershipTick,
    Snapshot,
    OpStart { kind: OpKind },
    WriteTick,
    ReadArrival,
    PhaseRetry { op: usize, key: PhaseKey },
    OpTimeout { op: usize },
}

#[derive(Debug, Clone)]
struct Scheduled {
    at: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: the heap pops the earliest (at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

/// Driver-side measurements of one phase.
#[derive(Debug, Clone, Default)]
struct PhaseStats {
    participants: u64,
    messages: u64,
    max_depth: u32,
}

#[derive(Debug)]
struct OpTrack {
    op: ClientOp,
    client: NodeId,
    t_invoke: f64,
    t_respond: Option<f64>,
    status: Option<OpStatus>,
    consult_key: Option<PhaseKey>,
    prop_key: Option<PhaseKey>,
    t_consult_start: Option<f64>,
    t_prop_start: Option<f64>,
    consulted: Option<Versioned>,
    propagated: Option<Versioned>,
    consult_responders: BTreeSet<NodeId>,
    prop_responders: BTreeSet<NodeId>,
    retries: u32,
}

/// Deterministic discrete-event simulation of one experiment.
pub struct Simulation {
    cfg: ExperimentConfig,
    res: Resolved,
    rng: ChaCha8Rng,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    pop: Population,
    ops: Vec<OpTrack>,
    active: HashMap<NodeId, usize>,
    phases: HashMap<PhaseKey, PhaseStats>,
    /// Largest tag of any completed propagation.
    last_complete: Tag,
    in_flight: u64,
    pending_starts: u64,
    seq_issued: usize,
    summary: RunSummary,
    snapshots: Vec<Snapshot>,
    messages: Vec<MessageRecord>,
}

/// Runs `cfg` to completion.
pub fn run(cfg: &ExperimentConfig) -> Result<TraceBundle, ConfigError> {
    Ok(Simulation::new(cfg.clone())?.run())
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ConfigError> {
        let res = cfg.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pop = Population::init(&cfg, &res, &mut rng);
        let mut sim = Simulation {
            cfg,
            res,
            rng,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            pop,
            ops: Vec::new(),
            active: HashMap::new(),
            phases: HashMap::new(),
            last_complete: Tag::INITIAL,
            in_flight: 0,
            pending_starts: 0,
            seq_issued: 0,
            summary: RunSummary::default(),
            snapshots: Vec::new(),
            messages: Vec::new(),
        };
        sim.schedule_initial();
        Ok(sim)
    }

    pub fn resolved(&self) -> &Resolved {
        &self.res
    }

    pub fn population(&self) -> &Population {
        &self.pop
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    fn schedule(&mut self, at: f64, kind: EventKind) {
        if let EventKind::OpStart { .. } = kind {
            self.pending_starts += 1;
        }
        if let EventKind::Deliver { .. } = kind {
            self.in_flight += 1;
        }
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, kind });
    }

    fn schedule_initial(&mut self) {
        self.schedule(0.0, EventKind::Snapshot);
        if self.cfg.params.c > 0.0 {
            self.schedule(self.cfg.churn_period, EventKind::ChurnTick);
        }
        if self.cfg.membership.mode == crate::membership::MembershipMode::Cyclon {
            self.schedule(self.cfg.membership.shuffle_period, EventKind::MembershipTick);
        }
        match self.cfg.workload.clone() {
            Workload::None => {}
            Workload::Sequential { ops, pattern, .. } => {
                if ops > 0 {
                    self.seq_issued = 1;
                    self.schedule(0.0, EventKind::OpStart { kind: sequential_kind(pattern, 0) });
                }
            }
            Workload::Periodic { read_rate, .. } => {
                self.schedule(0.0, EventKind::WriteTick);
                if read_rate > 0.0 {
                    let gap = Exp::new(read_rate).expect("positive rate").sample(&mut self.rng);
                    self.schedule(gap, EventKind::ReadArrival);
                }
            }
            Workload::Random { ops, write_fraction, spread } => {
                let mut starts: Vec<(f64, OpKind)> = (0..ops)
                    .map(|_| {
                        let at = if spread > 0.0 { self.rng.random_range(0.0..=spread) } else { 0.0 };
                        let kind = if self.rng.random_bool(write_fraction) { OpKind::Write } else { OpKind::Read };
                        (at, kind)
                    })
                    .collect();
                starts.sort_by(|a, b| a.0.total_cmp(&b.0));
                for (at, kind) in starts {
                    self.schedule(at, EventKind::OpStart { kind });
                }
            }
        }
    }

    fn quiescent(&self) -> bool {
        let workload_spent = match &self.cfg.workload {
            Workload::Periodic { .. } => false,
            _ => self.pending_starts == 0,
        };
        workload_spent && self.active.is_empty() && self.in_flight == 0
    }

    /// Processes events until the duration elapses, the queue empties, or the
    /// run goes quiescent.
    pub fn run(mut self) -> TraceBundle {
        let mut stopped_early = false;
        while let Some(next) = self.queue.peek() {
            if next.at > self.cfg.duration {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.summary.events += 1;
            self.handle(ev.kind);
            if self.cfg.stop_when_quiescent && self.quiescent() {
                stopped_early = true;
                break;
            }
        }
        self.summary.truncated = !stopped_early && self.queue.is_empty() && self.now < self.cfg.duration;
        self.finish()
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::Deliver { to, env, sent_at } => {
                self.in_flight -= 1;
                self.deliver(to, env, sent_at);
            }
            EventKind::ChurnTick => {
                self.churn();
                self.schedule(self.now + self.cfg.churn_period, EventKind::ChurnTick);
            }
            EventKind::MembershipTick => {
                self.pop.membership_cycle(self.res.age_limit);
                self.schedule(self.now + self.cfg.membership.shuffle_period, EventKind::MembershipTick);
            }
            EventKind::Snapshot => {
                self.snapshots.push(Snapshot {
                    t: self.now,
                    uptodate_count: self.pop.count_at_least(self.last_complete) as u64,
                    live_count: self.pop.len() as u64,
                });
                self.schedule(self.now + self.cfg.snapshot_period, EventKind::Snapshot);
            }
            EventKind::OpStart { kind } => {
                self.pending_starts -= 1;
                self.start_op(kind);
            }
            EventKind::WriteTick => {
                self.start_op(OpKind::Write);
                if let Workload::Periodic { write_period, .. } = self.cfg.workload {
                    self.schedule(self.now + write_period, EventKind::WriteTick);
                }
            }
            EventKind::ReadArrival => {
                self.start_op(OpKind::Read);
                if let Workload::Periodic { read_rate, .. } = self.cfg.workload {
                    let gap = Exp::new(read_rate).expect("positive rate").sample(&mut self.rng);
                    self.schedule(self.now + gap, EventKind::ReadArrival);
                }
            }
            EventKind::PhaseRetry { op, key } => self.retry(op, key),
            EventKind::OpTimeout { op } => {
                if self.ops[op].status.is_none() {
                    let client = self.ops[op].client;
                    if let Some(node) = self.pop.nodes.get_mut(&client) {
                        self.ops[op].op.abort(node);
                    }
                    self.end_op(op, OpStatus::Timeout);
                }
            }
        }
    }

    fn start_op(&mut self, kind: OpKind) {
        // An op invoked at the horizon could never respond.
        if self.now >= self.cfg.duration {
            return;
        }
        let idle: Vec<NodeId> =
            self.pop.live.as_slice().iter().copied().filter(|id| !self.active.contains_key(id)).collect();
        if idle.is_empty() {
            self.summary.skipped_ops += 1;
            self.after_op_slot();
            return;
        }
        let client = idle[self.rng.random_range(0..idle.len())];
        let op_id = self.ops.len();
        let mut op = match kind {
            OpKind::Read => ClientOp::read(),
            OpKind::Write => ClientOp::write(ObjectValue::new(format!("w{op_id}"))),
        };
        let params = self.res.protocol;
        let mode = self.cfg.membership.mode;
        let start = {
            let Simulation { pop: Population { nodes, live, .. }, rng, .. } = self;
            let node = nodes.get_mut(&client).expect("client is live");
            let mut sampler = PeerSampler { mode, live, rng };
            op.begin(node, &params, &mut sampler)
        };
        self.ops.push(OpTrack {
            op,
            client,
            t_invoke: self.now,
            t_respond: None,
            status: None,
            consult_key: Some(start.key),
            prop_key: None,
            t_consult_start: Some(self.now),
            t_prop_start: None,
            consulted: None,
            propagated: None,
            consult_responders: BTreeSet::new(),
            prop_responders: BTreeSet::new(),
            retries: 0,
        });
        self.active.insert(client, op_id);
        self.schedule(self.now + self.res.op_timeout, EventKind::OpTimeout { op: op_id });
        self.launch_phase(op_id, start);
        // The phase may already be complete (q = 1).
        self.progress(op_id);
    }

    fn launch_phase(&mut self, op: usize, start: PhaseStart) {
        self.phases.insert(start.key, PhaseStats { participants: 1, messages: 0, max_depth: 0 });
        if start.degraded {
            self.summary.degraded_fanouts += 1;
        }
        self.send_all(start.outbound);
        self.schedule(self.now + self.res.retry_period, EventKind::PhaseRetry { op, key: start.key });
    }

    fn retry(&mut self, op: usize, key: PhaseKey) {
        if self.ops[op].status.is_some() || self.ops[op].op.current_phase() != Some(key) {
            return;
        }
        let client = self.ops[op].client;
        let params = self.res.protocol;
        let mode = self.cfg.membership.mode;
        let again = {
            let Simulation { pop: Population { nodes, live, .. }, rng, .. } = self;
            let Some(node) = nodes.get_mut(&client) else { return };
            let mut sampler = PeerSampler { mode, live, rng };
            node.retry_phase(key, &params, &mut sampler)
        };
        if let Some(again) = again {
            self.ops[op].retries += 1;
            if again.degraded {
                self.summary.degraded_fanouts += 1;
            }
            self.send_all(again.outbound);
            self.schedule(self.now + self.res.retry_period, EventKind::PhaseRetry { op, key });
        }
    }

    fn send_all(&mut self, outbound: Vec<Outbound>) {
        for Outbound { to, env } in outbound {
            let key = env.msg.phase_key(to);
            if let Some(s) = self.phases.get_mut(&key) {
                s.messages += 1;
            }
            let delay = self.cfg.message_delay.sample(&mut self.rng);
            let sent_at = self.now;
            self.schedule(self.now + delay, EventKind::Deliver { to, env, sent_at });
        }
    }

    fn deliver(&mut self, to: NodeId, env: Envelope, sent_at: f64) {
        let live = self.pop.is_live(to);
        if self.cfg.record_messages {
            let m = &env.msg;
            self.messages.push(MessageRecord {
                t_send: sent_at,
                t_deliver: self.now,
                kind: m.kind.to_string(),
                from: m.sender.0,
                to: to.0,
                client: m.client.map_or(0, |c| c.0),
                sn: m.sn,
                ttl: m.ttl,
                tag: m.tag.to_string(),
                delivered: live,
            });
        }
        if !live {
            self.summary.dropped_to_departed += 1;
            return;
        }
        let params = self.res.protocol;
        let mode = self.cfg.membership.mode;
        let reaction = {
            let Simulation { pop: Population { nodes, live, .. }, rng, .. } = self;
            let node = nodes.get_mut(&to).expect("live node has state");
            let mut sampler = PeerSampler { mode, live, rng };
            node.participate(env, &params, &mut sampler)
        };
        if reaction.degraded {
            self.summary.degraded_fanouts += 1;
        }
        match reaction.event {
            Participation::Joined { key, depth } => {
                if let Some(s) = self.phases.get_mut(&key) {
                    s.participants += 1;
                    s.max_depth = s.max_depth.max(depth);
                }
            }
            Participation::Response { accepted: false, .. } => self.summary.late_responses += 1,
            Participation::Response { accepted: true, .. } => {
                if let Some(&op) = self.active.get(&to) {
                    self.send_all(reaction.outbound);
                    self.progress(op);
                    return;
                }
            }
            Participation::Forwarded { .. } | Participation::Dropped { .. } => {}
        }
        self.send_all(reaction.outbound);
    }

    fn progress(&mut self, op: usize) {
        let client = self.ops[op].client;
        let params: ProtocolParams = self.res.protocol;
        let mode = self.cfg.membership.mode;
        let step = {
            let Simulation { pop: Population { nodes, live, .. }, rng, ops, .. } = self;
            let Some(node) = nodes.get_mut(&client) else { return };
            let mut sampler = PeerSampler { mode, live, rng };
            ops[op].op.advance(node, &params, &mut sampler)
        };
        match step {
            Progress::Pending => {}
            Progress::Propagating { consulted, start } => {
                let t = &mut self.ops[op];
                // The pair this op installs, kept even if it never completes:
                // readers may still pick it up.
                t.propagated = Some(match t.op.kind() {
                    OpKind::Read => consulted.result.clone(),
                    OpKind::Write => Versioned::new(
                        ObjectValue::new(format!("w{op}")),
                        consulted.result.tag.advance(client),
                    ),
                });
                t.consulted = Some(consulted.result);
                t.consult_responders = consulted.responders;
                t.prop_key = Some(start.key);
                t.t_prop_start = Some(self.now);
                self.launch_phase(op, start);
                self.progress(op);
            }
            Progress::Finished { propagated } => {
                if propagated.result.tag > self.last_complete {
                    self.last_complete = propagated.result.tag;
                }
                let t = &mut self.ops[op];
                t.propagated = Some(propagated.result);
                t.prop_responders = propagated.responders;
                self.end_op(op, OpStatus::Completed);
            }
        }
    }

    fn end_op(&mut self, op: usize, status: OpStatus) {
        let t = &mut self.ops[op];
        t.status = Some(status);
        t.t_respond = Some(self.now);
        self.active.remove(&t.client);
        self.after_op_slot();
    }

    /// Schedules the next sequential operation, if any remain.
    fn after_op_slot(&mut self) {
        if let Workload::Sequential { ops, gap, pattern } = self.cfg.workload {
            if self.seq_issued < ops {
                let kind = sequential_kind(pattern, self.seq_issued);
                self.seq_issued += 1;
                self.schedule(self.now + gap, EventKind::OpStart { kind });
            }
        }
    }

    fn churn(&mut self) {
        let out = self.pop.churn_tick(self.res.churn_per_tick, &mut self.rng);
        self.summary.churned += out.departed.len() as u64;
        for id in out.departed {
            if let Some(op) = self.active.get(&id).copied() {
                self.end_op(op, OpStatus::ClientDeparted);
            }
        }
        debug_assert_eq!(self.pop.len(), self.pop.target_size());
    }

    fn finish(mut self) -> TraceBundle {
        self.summary.end_time = self.now;
        let ops = std::mem::take(&mut self.ops);
        let records = ops
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let stats = |k: Option<PhaseKey>| k.and_then(|k| self.phases.get(&k)).cloned().unwrap_or_default();
                let (cs, ps) = (stats(t.consult_key), stats(t.prop_key));
                OpRecord {
                    op_id: i as u64,
                    kind: t.op.kind(),
                    client: t.client,
                    status: t.status.unwrap_or(OpStatus::Timeout),
                    t_invoke: t.t_invoke,
                    t_respond: t.t_respond.unwrap_or(self.now),
                    t_consult_start: t.t_consult_start,
                    t_prop_start: t.t_prop_start,
                    consulted: t.consulted,
                    propagated: t.propagated,
                    consult_responders: t.consult_responders,
                    prop_responders: t.prop_responders,
                    distinct_contacts: cs.participants + ps.participants,
                    max_depth: cs.max_depth.max(ps.max_depth),
                    messages: cs.messages + ps.messages,
                    retries: t.retries,
                }
            })
            .collect();
        TraceBundle { ops: records, snapshots: self.snapshots, messages: self.messages, summary: self.summary }
    }
}

fn sequential_kind(pattern: OpPattern, i: usize) -> OpKind {
    match pattern {
        OpPattern::WriteRead if i.is_multiple_of(2) => OpKind::Write,
        OpPattern::WriteRead | OpPattern::Reads => OpKind::Read,
        OpPattern::Writes => OpKind::Write,
    }
}
