//! Per-node state machine of the read/write memory.
//!
//! A client runs every operation as two disseminations: a consultation that
//! collects the freshest `(value, tag)` from `q` distinct participants, then
//! a propagation that installs the chosen pair at `q` distinct participants.
//! Each dissemination is a random tree of fan-out `k` and depth `ℓ`; a node
//! that receives a message for a phase it already joined passes it on to one
//! other neighbor with the ttl untouched.
//!
//! Handlers are run-to-completion and return the messages they want sent.
//! The driver owns delivery and timing.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::membership::{NeighborSampler, View};
use crate::types::{Envelope, Message, MessageKind, NodeId, ObjectValue, PhaseKey, Tag, Versioned};

/// How a participant treats the payload of a propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropAdoption {
    /// Always overwrite the local pair with the propagated one.
    Literal,
    /// Overwrite only with a strictly fresher pair.
    #[default]
    Monotonic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolParams {
    pub quorum: usize,
    pub depth: u32,
    pub fanout: usize,
    pub adoption: PropAdoption,
    /// Maximum number of duplicate re-forwards along one message lineage.
    pub dup_hop_cap: u32,
}

impl ProtocolParams {
    pub fn default_dup_hop_cap(depth: u32, fanout: usize) -> u32 {
        (4 * depth as usize * fanout).max(1) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub to: NodeId,
    pub env: Envelope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Participation {
    /// First visit of this phase: the node served it and answered the client.
    Joined { key: PhaseKey, depth: u32 },
    /// Already joined; the message was passed to another neighbor.
    Forwarded { key: PhaseKey },
    /// Already joined and the duplicate budget is spent (or nobody to pass to).
    Dropped { key: PhaseKey },
    /// A response reached its client. `accepted` is false for phases that are
    /// no longer open.
    Response { key: PhaseKey, from: NodeId, accepted: bool },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reaction {
    pub outbound: Vec<Outbound>,
    pub event: Participation,
    /// Fewer neighbors than requested were available for the fan-out.
    pub degraded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseStatus {
    Pending,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseStart {
    pub key: PhaseKey,
    pub outbound: Vec<Outbound>,
    pub degraded: bool,
}

#[derive(Clone, Debug)]
struct OpenPhase {
    kind: MessageKind,
    payload: Versioned,
    responders: BTreeSet<NodeId>,
    contacted: HashSet<NodeId>,
}

/// Replica and client state of one node.
#[derive(Clone, Debug)]
pub struct NodeState {
    me: NodeId,
    held: Versioned,
    marked: HashSet<PhaseKey>,
    sn: u64,
    /// `rcvd_from_qnodes` plus the fan-out bookkeeping of the client's open
    /// phases.
    open: HashMap<PhaseKey, OpenPhase>,
    pub view: View,
}

impl NodeState {
    pub fn new(me: NodeId, held: Versioned, view: View) -> Self {
        NodeState { me, held, marked: HashSet::new(), sn: 0, open: HashMap::new(), view }
    }

    pub fn id(&self) -> NodeId {
        self.me
    }

    pub fn held(&self) -> &Versioned {
        &self.held
    }

    pub fn tag(&self) -> Tag {
        self.held.tag
    }

    pub fn sn(&self) -> u64 {
        self.sn
    }

    pub fn is_marked(&self, key: PhaseKey) -> bool {
        self.marked.contains(&key)
    }

    pub fn responders(&self, key: PhaseKey) -> Option<&BTreeSet<NodeId>> {
        self.open.get(&key).map(|p| &p.responders)
    }

    /// Overwrites the local pair, as a writer does before propagating.
    pub fn install(&mut self, v: Versioned) {
        self.held = v;
    }

    fn adopt(&mut self, incoming: &Versioned, mode: PropAdoption) {
        match mode {
            PropAdoption::Literal => self.held = incoming.clone(),
            PropAdoption::Monotonic => {
                if self.held.superseded_by(incoming) {
                    self.held = incoming.clone();
                }
            }
        }
    }

    /// Opens a new client phase: bumps the sequence number and sends the
    /// payload to `k` sampled neighbors with ttl `ℓ`. The client is the root
    /// of its own dissemination tree and counts as its first participant.
    pub fn start_phase(
        &mut self,
        kind: MessageKind,
        payload: Versioned,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> PhaseStart {
        assert!(kind != MessageKind::Resp, "responses do not open phases");
        self.sn += 1;
        let key = PhaseKey { client: self.me, sn: self.sn };
        self.marked.insert(key);
        if kind == MessageKind::Prop {
            self.adopt(&payload, params.adoption);
        }
        let mut phase = OpenPhase {
            kind,
            payload,
            responders: BTreeSet::from([self.me]),
            contacted: HashSet::new(),
        };
        let (outbound, degraded) = self.fan_out_client(&mut phase, key, params, sampler);
        self.open.insert(key, phase);
        PhaseStart { key, outbound, degraded }
    }

    /// Re-sends an open phase to `k` neighbors not contacted before.
    pub fn retry_phase(
        &mut self,
        key: PhaseKey,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> Option<PhaseStart> {
        let mut phase = self.open.remove(&key)?;
        let (outbound, degraded) = self.fan_out_client(&mut phase, key, params, sampler);
        self.open.insert(key, phase);
        Some(PhaseStart { key, outbound, degraded })
    }

    fn fan_out_client(
        &self,
        phase: &mut OpenPhase,
        key: PhaseKey,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> (Vec<Outbound>, bool) {
        if params.depth == 0 {
            return (Vec::new(), false);
        }
        let mut exclude: Vec<NodeId> = phase.contacted.iter().copied().collect();
        exclude.sort();
        let mut sample = sampler.sample(self.me, &self.view, params.fanout, &exclude);
        if sample.ids.is_empty() && !exclude.is_empty() {
            // Everyone reachable was already asked once; ask again.
            sample = sampler.sample(self.me, &self.view, params.fanout, &[]);
        }
        // Consultations carry the client's current pair, propagations the
        // pair being installed.
        let payload = match phase.kind {
            MessageKind::Cons => self.held.clone(),
            _ => phase.payload.clone(),
        };
        let outbound = sample
            .ids
            .iter()
            .map(|&to| {
                phase.contacted.insert(to);
                Outbound {
                    to,
                    env: Envelope::from(Message {
                        kind: phase.kind,
                        value: payload.value.clone(),
                        tag: payload.tag,
                        ttl: params.depth,
                        client: Some(key.client),
                        sn: key.sn,
                        sender: self.me,
                    }),
                }
            })
            .collect();
        (outbound, sample.short)
    }

    pub fn phase_poll(&self, key: PhaseKey, q: usize) -> PhaseStatus {
        if q == 0 {
            return PhaseStatus::Complete;
        }
        match self.open.get(&key) {
            Some(p) if p.responders.len() >= q => PhaseStatus::Complete,
            Some(_) => PhaseStatus::Pending,
            None => PhaseStatus::Pending,
        }
    }

    /// Closes a phase and returns its responders. Later responses for it are
    /// treated as late.
    pub fn close_phase(&mut self, key: PhaseKey) -> Option<BTreeSet<NodeId>> {
        self.open.remove(&key).map(|p| p.responders)
    }

    /// Message handler.
    pub fn participate(
        &mut self,
        env: Envelope,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> Reaction {
        let Envelope { msg, dup_hops } = env;
        let key = msg.phase_key(self.me);
        if msg.kind == MessageKind::Resp {
            return self.on_response(msg, key);
        }
        if self.marked.contains(&key) {
            return self.pass_on(msg, dup_hops, key, params, sampler);
        }

        self.marked.insert(key);
        let client = msg.client.expect("dissemination messages carry their client");
        let depth = params.depth.saturating_sub(msg.ttl) + 1;
        let (value, tag) = match msg.kind {
            MessageKind::Cons => (self.held.value.clone(), self.held.tag),
            _ => {
                let incoming = Versioned::new(msg.value.clone(), msg.tag);
                self.adopt(&incoming, params.adoption);
                (msg.value, msg.tag)
            }
        };
        let ttl = msg.ttl.saturating_sub(1);
        let mut outbound = Vec::new();
        let mut degraded = false;
        if ttl > 0 {
            let mut sent_to_nbrs2 = Vec::with_capacity(params.fanout);
            let sample = sampler.sample(self.me, &self.view, params.fanout, &[msg.sender]);
            degraded = sample.short;
            for to in sample.ids {
                sent_to_nbrs2.push(to);
                outbound.push(Outbound {
                    to,
                    env: Envelope::from(Message {
                        kind: msg.kind,
                        value: value.clone(),
                        tag,
                        ttl,
                        client: Some(client),
                        sn: msg.sn,
                        sender: self.me,
                    }),
                });
            }
        }
        outbound.push(Outbound {
            to: client,
            env: Envelope::from(Message {
                kind: MessageKind::Resp,
                value: self.held.value.clone(),
                tag: self.held.tag,
                ttl,
                client: None,
                sn: msg.sn,
                sender: self.me,
            }),
        });
        Reaction { outbound, event: Participation::Joined { key, depth }, degraded }
    }

    fn pass_on(
        &mut self,
        mut msg: Message,
        dup_hops: u32,
        key: PhaseKey,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> Reaction {
        if dup_hops >= params.dup_hop_cap {
            return Reaction { outbound: Vec::new(), event: Participation::Dropped { key }, degraded: false };
        }
        let sample = sampler.sample(self.me, &self.view, 1, &[msg.sender]);
        let Some(&to) = sample.ids.first() else {
            return Reaction { outbound: Vec::new(), event: Participation::Dropped { key }, degraded: true };
        };
        msg.sender = self.me;
        Reaction {
            outbound: vec![Outbound { to, env: Envelope { msg, dup_hops: dup_hops + 1 } }],
            event: Participation::Forwarded { key },
            degraded: false,
        }
    }

    fn on_response(&mut self, msg: Message, key: PhaseKey) -> Reaction {
        let from = msg.sender;
        let Some(phase) = self.open.get_mut(&key) else {
            return Reaction {
                outbound: Vec::new(),
                event: Participation::Response { key, from, accepted: false },
                degraded: false,
            };
        };
        phase.responders.insert(from);
        let incoming = Versioned::new(msg.value, msg.tag);
        if self.held.superseded_by(&incoming) {
            self.held = incoming;
        }
        Reaction {
            outbound: Vec::new(),
            event: Participation::Response { key, from, accepted: true },
            degraded: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Read,
    Write,
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OpKind::Read => "read",
            OpKind::Write => "write",
        })
    }
}

/// Result of one finished phase, plus driver-side measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOutcome {
    pub key: PhaseKey,
    pub value: ObjectValue,
    pub tag: Tag,
    pub responders: BTreeSet<NodeId>,
    pub messages_sent: u64,
    pub max_depth_observed: u32,
    pub completed: bool,
    pub elapsed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedPhase {
    pub key: PhaseKey,
    pub result: Versioned,
    pub responders: BTreeSet<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Progress {
    Pending,
    /// Consultation closed; the propagation has been started.
    Propagating { consulted: ClosedPhase, start: PhaseStart },
    /// Propagation closed; the operation is over.
    Finished { propagated: ClosedPhase },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Idle,
    Consulting(PhaseKey),
    Propagating(PhaseKey),
    Done,
}

/// A read or write driven through its two phases at one client.
#[derive(Clone, Debug)]
pub struct ClientOp {
    kind: OpKind,
    write_value: Option<ObjectValue>,
    stage: Stage,
}

impl ClientOp {
    pub fn read() -> Self {
        ClientOp { kind: OpKind::Read, write_value: None, stage: Stage::Idle }
    }

    pub fn write(v: ObjectValue) -> Self {
        ClientOp { kind: OpKind::Write, write_value: Some(v), stage: Stage::Idle }
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn current_phase(&self) -> Option<PhaseKey> {
        match self.stage {
            Stage::Consulting(k) | Stage::Propagating(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    /// Starts the consultation.
    pub fn begin(
        &mut self,
        node: &mut NodeState,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> PhaseStart {
        assert_eq!(self.stage, Stage::Idle, "operation already started");
        let start = node.start_phase(MessageKind::Cons, node.held().clone(), params, sampler);
        self.stage = Stage::Consulting(start.key);
        start
    }

    /// Re-checks the current phase after a response; moves the operation
    /// forward when it is complete.
    pub fn advance(
        &mut self,
        node: &mut NodeState,
        params: &ProtocolParams,
        sampler: &mut dyn NeighborSampler,
    ) -> Progress {
        match self.stage {
            Stage::Consulting(key) if node.phase_poll(key, params.quorum) == PhaseStatus::Complete => {
                let responders = node.close_phase(key).unwrap_or_default();
                let consulted = ClosedPhase { key, result: node.held().clone(), responders };
                let payload = match self.kind {
                    OpKind::Read => consulted.result.clone(),
                    OpKind::Write => {
                        let tag = consulted.result.tag.advance(node.id());
                        let v = Versioned::new(self.write_value.clone().unwrap_or_default(), tag);
                        node.install(v.clone());
                        v
                    }
                };
                let start = node.start_phase(MessageKind::Prop, payload, params, sampler);
                self.stage = Stage::Propagating(start.key);
                Progress::Propagating { consulted, start }
            }
            Stage::Propagating(key) if node.phase_poll(key, params.quorum) == PhaseStatus::Complete => {
                let payload = node.open.get(&key).map(|p| p.payload.clone()).unwrap_or_default();
                let responders = node.close_phase(key).unwrap_or_default();
                self.stage = Stage::Done;
                Progress::Finished { propagated: ClosedPhase { key, result: payload, responders } }
            }
            _ => Progress::Pending,
        }
    }

    /// Abandons the operation, closing whatever phase is open.
    pub fn abort(&mut self, node: &mut NodeState) {
        if let Some(key) = self.current_phase() {
            node.close_phase(key);
        }
        self.stage = Stage::Done;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membership::{NeighborEntry, Sample};
    use std::collections::VecDeque;

    /// Hands out neighbors from a fixed list, skipping excluded ids.
    struct Fixed(Vec<NodeId>);

    impl NeighborSampler for Fixed {
        fn sample(&mut self, owner: NodeId, _view: &View, count: usize, exclude: &[NodeId]) -> Sample {
            let ids: Vec<NodeId> =
                self.0.iter().copied().filter(|id| *id != owner && !exclude.contains(id)).take(count).collect();
            Sample { short: ids.len() < count, ids }
        }
    }

    fn ids(v: &[u64]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    fn node(id: u64, value: &str, tag: Tag) -> NodeState {
        NodeState::new(NodeId(id), Versioned::new(ObjectValue::from(value), tag), View::empty(NodeId(id), 8))
    }

    fn params(q: usize, depth: u32, k: usize) -> ProtocolParams {
        ProtocolParams {
            quorum: q,
            depth,
            fanout: k,
            adoption: PropAdoption::Monotonic,
            dup_hop_cap: ProtocolParams::default_dup_hop_cap(depth, k),
        }
    }

    fn cons(ttl: u32, client: u64, sn: u64, sender: u64) -> Envelope {
        Envelope::from(Message {
            kind: MessageKind::Cons,
            value: ObjectValue::Bottom,
            tag: Tag::INITIAL,
            ttl,
            client: Some(NodeId(client)),
            sn,
            sender: NodeId(sender),
        })
    }

    fn prop(value: &str, tag: Tag, client: u64, sn: u64) -> Envelope {
        Envelope::from(Message {
            kind: MessageKind::Prop,
            value: value.into(),
            tag,
            ttl: 3,
            client: Some(NodeId(client)),
            sn,
            sender: NodeId(client),
        })
    }

    #[test]
    fn start_phase_fans_out_k() {
        let mut n = node(1, "v0", Tag::INITIAL);
        let mut s = Fixed(ids(&[2, 3, 4, 5, 6, 7, 8, 9, 10, 11]));
        let p = params(5, 4, 3);
        let first = n.start_phase(MessageKind::Cons, n.held().clone(), &p, &mut s);
        assert_eq!(first.outbound.len(), 3);
        assert!(!first.degraded);
        let targets: HashSet<_> = first.outbound.iter().map(|o| o.to).collect();
        assert_eq!(targets.len(), 3);
        assert!(first.outbound.iter().all(|o| o.env.msg.ttl == 4 && o.env.msg.sn == first.key.sn));
        let second = n.start_phase(MessageKind::Prop, n.held().clone(), &p, &mut s);
        assert!(second.key.sn > first.key.sn);
    }

    #[test]
    fn start_phase_degrades_with_small_view() {
        let mut n = node(1, "v0", Tag::INITIAL);
        let mut s = Fixed(ids(&[2, 3]));
        let start = n.start_phase(MessageKind::Cons, n.held().clone(), &params(5, 4, 3), &mut s);
        assert_eq!(start.outbound.len(), 2);
        assert!(start.degraded);
    }

    #[test]
    fn retry_prefers_fresh_neighbors() {
        let mut n = node(1, "v0", Tag::INITIAL);
        let mut s = Fixed(ids(&[2, 3, 4, 5, 6, 7]));
        let p = params(5, 2, 2);
        let start = n.start_phase(MessageKind::Cons, n.held().clone(), &p, &mut s);
        let again = n.retry_phase(start.key, &p, &mut s).unwrap();
        assert_eq!(again.key, start.key);
        assert_eq!(again.outbound.iter().map(|o| o.to).collect::<Vec<_>>(), ids(&[4, 5]));
    }

    #[test]
    fn poll_counts_distinct_responders() {
        let mut n = node(1, "v0", Tag::INITIAL);
        let mut s = Fixed(ids(&[2, 3, 4]));
        let p = params(5, 1, 2);
        let key = n.start_phase(MessageKind::Cons, n.held().clone(), &p, &mut s).key;
        let resp = |from: u64| {
            Envelope::from(Message {
                kind: MessageKind::Resp,
                value: "v0".into(),
                tag: Tag::INITIAL,
                ttl: 0,
                client: None,
                sn: key.sn,
                sender: NodeId(from),
            })
        };
        for from in [2, 3, 4, 4] {
            n.participate(resp(from), &p, &mut s);
        }
        // client itself + 2, 3, 4
        assert_eq!(n.phase_poll(key, 5), PhaseStatus::Pending);
        n.participate(resp(5), &p, &mut s);
        assert_eq!(n.phase_poll(key, 5), PhaseStatus::Complete);
        assert_eq!(n.phase_poll(key, 0), PhaseStatus::Complete);
        n.close_phase(key);
        let late = n.participate(resp(6), &p, &mut s);
        assert_eq!(late.event, Participation::Response { key, from: NodeId(6), accepted: false });
    }

    #[test]
    fn unmarked_cons_fans_out_and_answers() {
        let mut n = node(4, "v1", Tag::new(2, 9));
        let mut s = Fixed(ids(&[7, 8, 9, 10]));
        let r = n.participate(cons(2, 1, 1, 7), &params(5, 4, 2), &mut s);
        assert!(matches!(r.event, Participation::Joined { depth: 3, .. }));
        assert_eq!(r.outbound.len(), 3);
        let (fwd, resp) = r.outbound.split_at(2);
        for o in fwd {
            assert_eq!(o.env.msg.kind, MessageKind::Cons);
            assert_eq!(o.env.msg.ttl, 1);
            assert_eq!((o.env.msg.value.to_string(), o.env.msg.tag), ("v1".to_owned(), Tag::new(2, 9)));
            assert_ne!(o.to, NodeId(7));
        }
        assert_eq!(resp[0].to, NodeId(1));
        assert_eq!(resp[0].env.msg.kind, MessageKind::Resp);
        assert_eq!(resp[0].env.msg.client, None);
        assert_eq!(resp[0].env.msg.tag, Tag::new(2, 9));
    }

    #[test]
    fn marked_cons_is_passed_once_without_response() {
        let mut n = node(4, "v1", Tag::new(2, 9));
        let mut s = Fixed(ids(&[7, 8, 9, 10]));
        let p = params(5, 4, 2);
        n.participate(cons(2, 1, 1, 7), &p, &mut s);
        let r = n.participate(cons(2, 1, 1, 8), &p, &mut s);
        assert_eq!(r.event, Participation::Forwarded { key: PhaseKey { client: NodeId(1), sn: 1 } });
        assert_eq!(r.outbound.len(), 1);
        assert_eq!(r.outbound[0].env.msg.ttl, 2);
        assert_eq!(r.outbound[0].env.dup_hops, 1);
        assert_ne!(r.outbound[0].to, NodeId(8));
    }

    #[test]
    fn duplicate_budget_is_capped() {
        let mut n = node(4, "v1", Tag::new(2, 9));
        let mut s = Fixed(ids(&[7, 8]));
        let p = params(5, 1, 1);
        n.participate(cons(1, 1, 1, 7), &p, &mut s);
        let mut env = cons(1, 1, 1, 7);
        env.dup_hops = p.dup_hop_cap;
        let r = n.participate(env, &p, &mut s);
        assert!(r.outbound.is_empty());
        assert!(matches!(r.event, Participation::Dropped { .. }));
    }

    #[test]
    fn same_sn_from_different_clients_do_not_collide() {
        let mut n = node(4, "v1", Tag::new(2, 9));
        let mut s = Fixed(ids(&[7, 8]));
        let p = params(5, 2, 1);
        let a = n.participate(cons(2, 1, 1, 7), &p, &mut s);
        let b = n.participate(cons(2, 2, 1, 7), &p, &mut s);
        assert!(matches!(a.event, Participation::Joined { .. }));
        assert!(matches!(b.event, Participation::Joined { .. }));
    }

    #[test]
    fn prop_adoption_modes() {
        let mut s = Fixed(ids(&[7, 8]));
        let mut lit = node(4, "v0", Tag::new(1, 3));
        let mut p = params(5, 3, 1);
        p.adoption = PropAdoption::Literal;
        lit.participate(prop("v1", Tag::new(2, 4), 1, 1), &p, &mut s);
        assert_eq!(lit.tag(), Tag::new(2, 4));
        lit.participate(prop("v0", Tag::new(1, 3), 2, 1), &p, &mut s);
        assert_eq!(lit.tag(), Tag::new(1, 3));

        let mut mono = node(4, "v1", Tag::new(2, 4));
        p.adoption = PropAdoption::Monotonic;
        let r = mono.participate(prop("v0", Tag::new(1, 3), 1, 1), &p, &mut s);
        assert_eq!(mono.held(), &Versioned::new("v1".into(), Tag::new(2, 4)));
        // forwards the propagated pair, answers with its own
        assert_eq!(r.outbound[0].env.msg.tag, Tag::new(1, 3));
        assert_eq!(r.outbound.last().unwrap().env.msg.tag, Tag::new(2, 4));
    }

    #[test]
    fn response_adopts_fresher_pair_only() {
        let mut n = node(1, "v1", Tag::new(1, 5));
        let mut s = Fixed(ids(&[2]));
        let p = params(3, 1, 1);
        let key = n.start_phase(MessageKind::Cons, n.held().clone(), &p, &mut s).key;
        let resp = |from: u64, v: &str, t: Tag| {
            Envelope::from(Message {
                kind: MessageKind::Resp,
                value: v.into(),
                tag: t,
                ttl: 0,
                client: None,
                sn: key.sn,
                sender: NodeId(from),
            })
        };
        n.participate(resp(2, "v0", Tag::INITIAL), &p, &mut s);
        assert_eq!(n.tag(), Tag::new(1, 5));
        n.participate(resp(3, "v2", Tag::new(1, 7)), &p, &mut s);
        assert_eq!(n.tag(), Tag::new(1, 7));
    }

    #[test]
    fn bottom_client_picks_up_initial_value() {
        let mut n = node(1, "", Tag::INITIAL);
        let mut s = Fixed(ids(&[2]));
        let p = params(2, 1, 1);
        let key = n.start_phase(MessageKind::Cons, n.held().clone(), &p, &mut s).key;
        n.participate(
            Envelope::from(Message {
                kind: MessageKind::Resp,
                value: "v0".into(),
                tag: Tag::INITIAL,
                ttl: 0,
                client: None,
                sn: key.sn,
                sender: NodeId(2),
            }),
            &p,
            &mut s,
        );
        assert_eq!(n.held().value, ObjectValue::initial());
    }

    /// Walks a fixed list cyclically so repeated draws spread over everyone.
    struct Rotating {
        ids: Vec<NodeId>,
        next: usize,
    }

    impl NeighborSampler for Rotating {
        fn sample(&mut self, owner: NodeId, _view: &View, count: usize, exclude: &[NodeId]) -> Sample {
            let mut ids = Vec::new();
            for _ in 0..self.ids.len() {
                let id = self.ids[self.next % self.ids.len()];
                self.next += 1;
                if ids.len() == count {
                    break;
                }
                if id != owner && !exclude.contains(&id) && !ids.contains(&id) {
                    ids.push(id);
                }
            }
            Sample { short: ids.len() < count, ids }
        }
    }

    /// Delivers messages in FIFO order across a small static cluster.
    struct Cluster {
        nodes: HashMap<NodeId, NodeState>,
        queue: VecDeque<Outbound>,
    }

    impl Cluster {
        fn new(n: u64) -> Self {
            let nodes = (1..=n)
                .map(|i| {
                    let view = View::from_entries(
                        NodeId(i),
                        n as usize,
                        (1..=n).filter(|&j| j != i).map(|j| NeighborEntry::new(j, 0)),
                    );
                    (NodeId(i), NodeState::new(NodeId(i), Versioned::new(ObjectValue::initial(), Tag::INITIAL), view))
                })
                .collect();
            Cluster { nodes, queue: VecDeque::new() }
        }

        fn run_op(&mut self, client: u64, mut op: ClientOp, p: &ProtocolParams) -> (ClosedPhase, ClosedPhase) {
            let all: Vec<NodeId> = {
                let mut v: Vec<_> = self.nodes.keys().copied().collect();
                v.sort();
                v
            };
            let mut s = Rotating { ids: all, next: client as usize };
            let c = NodeId(client);
            let start = op.begin(self.nodes.get_mut(&c).unwrap(), p, &mut s);
            self.queue.extend(start.outbound);
            let mut consulted = None;
            loop {
                let o = self.queue.pop_front().expect("operation stalled");
                let r = self.nodes.get_mut(&o.to).unwrap().participate(o.env, p, &mut s);
                self.queue.extend(r.outbound);
                match op.advance(self.nodes.get_mut(&c).unwrap(), p, &mut s) {
                    Progress::Pending => {}
                    Progress::Propagating { consulted: cp, start } => {
                        consulted = Some(cp);
                        self.queue.extend(start.outbound);
                    }
                    Progress::Finished { propagated } => {
                        // drain the rest of the dissemination
                        while let Some(o) = self.queue.pop_front() {
                            let r = self.nodes.get_mut(&o.to).unwrap().participate(o.env, p, &mut s);
                            self.queue.extend(r.outbound);
                        }
                        return (consulted.unwrap(), propagated);
                    }
                }
            }
        }
    }

    #[test]
    fn full_quorum_sequential_writes_then_read() {
        // q = n: every phase hears from every node.
        let mut c = Cluster::new(7);
        let p = params(7, 3, 2);
        let (_, w1) = c.run_op(5, ClientOp::write("a".into()), &p);
        assert_eq!(w1.result.tag, Tag::new(1, 5));
        let (consulted, w2) = c.run_op(2, ClientOp::write("b".into()), &p);
        assert_eq!(consulted.result.tag, Tag::new(1, 5));
        assert_eq!(w2.result.tag, Tag::new(2, 2));
        let (read, _) = c.run_op(7, ClientOp::read(), &p);
        assert_eq!(read.result, Versioned::new("b".into(), Tag::new(2, 2)));
        assert_eq!(read.responders.len(), 7);
    }

    #[test]
    fn fresh_system_read_returns_initial() {
        let mut c = Cluster::new(5);
        let p = params(5, 2, 2);
        let (read, prop) = c.run_op(3, ClientOp::read(), &p);
        assert_eq!(read.result, Versioned::new(ObjectValue::initial(), Tag::INITIAL));
        assert_eq!(prop.result.tag, Tag::INITIAL);
    }

    #[test]
    fn one_response_per_phase_per_node() {
        let mut c = Cluster::new(6);
        let p = params(6, 3, 2);
        let mut s = Rotating { ids: (1..=6).map(NodeId).collect(), next: 0 };
        let mut op = ClientOp::read();
        let start = op.begin(c.nodes.get_mut(&NodeId(1)).unwrap(), &p, &mut s);
        c.queue.extend(start.outbound);
        let mut resp_from: HashMap<NodeId, usize> = HashMap::new();
        while let Some(o) = c.queue.pop_front() {
            if o.env.msg.kind == MessageKind::Resp {
                *resp_from.entry(o.env.msg.sender).or_default() += 1;
            }
            let r = c.nodes.get_mut(&o.to).unwrap().participate(o.env, &p, &mut s);
            c.queue.extend(r.outbound);
        }
        assert!(resp_from.values().all(|&n| n == 1), "{resp_from:?}");
    }
}
