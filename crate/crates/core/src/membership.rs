//! Peer sampling: a Cyclon-style shuffling view per node, plus an idealised
//! mode that samples uniformly among all live nodes.
//!
//! In cyclon mode every node keeps at most `m` neighbors with ages. Once per
//! cycle a node ages its view, picks its oldest neighbor, and the two swap
//! their full views. Received entries go first when a view is rebuilt, then
//! the youngest old entries, until the view is full again.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub id: NodeId,
    pub age: u32,
}

impl NeighborEntry {
    pub fn new(id: u64, age: u32) -> Self {
        NeighborEntry { id: NodeId(id), age }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipMode {
    Cyclon,
    #[default]
    Perfect,
}

/// Result of a neighbor draw. `short` is set when fewer ids than requested
/// were available.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Sample {
    pub ids: Vec<NodeId>,
    pub short: bool,
}

/// A node's partial view of the membership.
///
/// Invariants: never contains `owner`, never contains an id twice, never holds
/// more than `capacity` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct View {
    owner: NodeId,
    capacity: usize,
    entries: Vec<NeighborEntry>,
}

impl View {
    pub fn empty(owner: NodeId, capacity: usize) -> Self {
        View { owner, capacity, entries: Vec::new() }
    }

    /// Builds a view from arbitrary entries, enforcing the invariants
    /// (first occurrence wins, overflow is cut).
    pub fn from_entries(owner: NodeId, capacity: usize, entries: impl IntoIterator<Item = NeighborEntry>) -> Self {
        let mut view = View::empty(owner, capacity);
        view.extend(entries);
        view
    }

    fn extend(&mut self, entries: impl IntoIterator<Item = NeighborEntry>) {
        for e in entries {
            if self.entries.len() >= self.capacity {
                break;
            }
            if e.id != self.owner && !self.contains(e.id) {
                self.entries.push(e);
            }
        }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[NeighborEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.iter().map(|e| e.id)
    }

    pub fn remove(&mut self, id: NodeId) {
        self.entries.retain(|e| e.id != id);
    }

    /// Picks the oldest neighbor (smallest id on ties) and returns it with a
    /// copy of the view that omits it. `None` for an isolated node.
    pub fn shuffle_initiate(&self) -> Option<(NodeId, Vec<NeighborEntry>)> {
        let target = self
            .entries
            .iter()
            .max_by(|a, b| a.age.cmp(&b.age).then(b.id.cmp(&a.id)))?
            .id;
        let offer = self.entries.iter().copied().filter(|e| e.id != target).collect();
        Some((target, offer))
    }

    /// Handles an incoming offer. Returns the reply (this view without any
    /// pointer to `from`) and the rebuilt view.
    pub fn shuffle_receive(&self, offer: &[NeighborEntry], from: NodeId) -> (Vec<NeighborEntry>, View) {
        let reply = self.entries.iter().copied().filter(|e| e.id != from).collect();
        (reply, self.merged(offer))
    }

    /// Received entries first, then this view's entries in their existing
    /// order. When the result overflows, the oldest old entries are the ones
    /// dropped.
    pub fn merged(&self, received: &[NeighborEntry]) -> View {
        let mut next = View::empty(self.owner, self.capacity);
        next.extend(received.iter().copied());
        let fresh: Vec<NeighborEntry> =
            self.entries.iter().copied().filter(|e| e.id != self.owner && !next.contains(e.id)).collect();
        let room = self.capacity.saturating_sub(next.len());
        let keep: HashSet<NodeId> = if fresh.len() > room {
            let mut by_age = fresh.clone();
            by_age.sort_by_key(|e| (e.age, e.id));
            by_age.iter().take(room).map(|e| e.id).collect()
        } else {
            fresh.iter().map(|e| e.id).collect()
        };
        next.extend(fresh.into_iter().filter(|e| keep.contains(&e.id)));
        next
    }

    /// Ages every entry by one cycle and evicts those older than `age_limit`.
    pub fn age_tick(&self, age_limit: u32) -> View {
        let entries = self
            .entries
            .iter()
            .map(|e| NeighborEntry { id: e.id, age: e.age.saturating_add(1) })
            .filter(|e| e.age <= age_limit)
            .collect();
        View { owner: self.owner, capacity: self.capacity, entries }
    }

    /// Uniformly draws up to `count` distinct ids, skipping `exclude`.
    pub fn sample_neighbors<R: Rng + ?Sized>(&self, count: usize, exclude: &[NodeId], rng: &mut R) -> Sample {
        let pool: Vec<NodeId> = self.ids().filter(|id| !exclude.contains(id)).collect();
        draw_from(&pool, count, rng)
    }
}

fn draw_from<R: Rng + ?Sized>(pool: &[NodeId], count: usize, rng: &mut R) -> Sample {
    if pool.len() <= count {
        return Sample { ids: pool.to_vec(), short: pool.len() < count };
    }
    let ids = index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect();
    Sample { ids, short: false }
}

/// The set of live node ids, supporting O(1) insert/remove and uniform draws.
/// Iteration order is deterministic given the sequence of operations.
#[derive(Clone, Debug, Default)]
pub struct LiveSet {
    ids: Vec<NodeId>,
    pos: HashMap<NodeId, usize>,
}

impl LiveSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NodeId) -> bool {
        if self.pos.contains_key(&id) {
            return false;
        }
        self.pos.insert(id, self.ids.len());
        self.ids.push(id);
        true
    }

    pub fn remove(&mut self, id: NodeId) -> bool {
        let Some(i) = self.pos.remove(&id) else {
            return false;
        };
        self.ids.swap_remove(i);
        if let Some(moved) = self.ids.get(i) {
            self.pos.insert(*moved, i);
        }
        true
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.pos.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn as_slice(&self) -> &[NodeId] {
        &self.ids
    }

    /// Uniformly draws up to `count` distinct live ids, skipping `exclude`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, exclude: &[NodeId], rng: &mut R) -> Sample {
        let excluded_live = exclude.iter().filter(|id| self.contains(**id)).collect::<HashSet<_>>().len();
        let available = self.ids.len() - excluded_live;
        if count >= available || 4 * (count + excluded_live) > self.ids.len() {
            let pool: Vec<NodeId> = self.ids.iter().copied().filter(|id| !exclude.contains(id)).collect();
            return draw_from(&pool, count, rng);
        }
        // Sparse draw: rejection is cheap when the request is a small share.
        let mut ids = Vec::with_capacity(count);
        while ids.len() < count {
            let id = self.ids[rng.random_range(0..self.ids.len())];
            if !exclude.contains(&id) && !ids.contains(&id) {
                ids.push(id);
            }
        }
        Sample { ids, short: false }
    }
}

/// Source of neighbors for the dissemination layer.
pub trait NeighborSampler {
    fn sample(&mut self, owner: NodeId, view: &View, count: usize, exclude: &[NodeId]) -> Sample;
}

/// Samples from the owner's view (cyclon) or from the whole live set (perfect).
pub struct PeerSampler<'a, R: Rng> {
    pub mode: MembershipMode,
    pub live: &'a LiveSet,
    pub rng: &'a mut R,
}

impl<R: Rng> NeighborSampler for PeerSampler<'_, R> {
    fn sample(&mut self, owner: NodeId, view: &View, count: usize, exclude: &[NodeId]) -> Sample {
        match self.mode {
            MembershipMode::Cyclon => view.sample_neighbors(count, exclude, self.rng),
            MembershipMode::Perfect => {
                let mut skip = Vec::with_capacity(exclude.len() + 1);
                skip.push(owner);
                skip.extend_from_slice(exclude);
                self.live.sample(count, &skip, self.rng)
            }
        }
    }
}

/// Initial view for a node: `capacity` distinct ids drawn from `live`.
pub fn random_view<R: Rng + ?Sized>(owner: NodeId, capacity: usize, live: &LiveSet, rng: &mut R) -> View {
    let sample = live.sample(capacity, &[owner], rng);
    View::from_entries(owner, capacity, sample.ids.into_iter().map(|id| NeighborEntry { id, age: 0 }))
}

/// View for a joining node, copied from its contacts' views plus the
/// contacts themselves.
pub fn bootstrap_view(owner: NodeId, capacity: usize, contacts: &[&View]) -> View {
    let mut entries = Vec::new();
    for v in contacts {
        entries.push(NeighborEntry { id: v.owner(), age: 0 });
    }
    for v in contacts {
        entries.extend_from_slice(v.entries());
    }
    View::from_entries(owner, capacity, entries)
}

/// Outcome counters of one membership cycle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CycleStats {
    pub exchanges: usize,
    pub dead_targets: usize,
    pub isolated: usize,
}

/// Runs one membership cycle over all views, in id order. Each initiator ages
/// its view, then swaps with its oldest neighbor; each side also advertises
/// itself with a fresh entry. Dead targets are dropped from the view.
pub fn cyclon_cycle(views: &mut BTreeMap<NodeId, View>, age_limit: u32) -> CycleStats {
    let mut stats = CycleStats::default();
    let order: Vec<NodeId> = views.keys().copied().collect();
    for i in order {
        let aged = views[&i].age_tick(age_limit);
        views.insert(i, aged);
        let Some((j, mut offer)) = views[&i].shuffle_initiate() else {
            stats.isolated += 1;
            continue;
        };
        let Some(target_view) = views.get(&j) else {
            stats.dead_targets += 1;
            views.get_mut(&i).expect("initiator is live").remove(j);
            continue;
        };
        offer.insert(0, NeighborEntry { id: i, age: 0 });
        let (mut reply, j_next) = target_view.shuffle_receive(&offer, i);
        reply.insert(0, NeighborEntry { id: j, age: 0 });
        let i_next = views[&i].merged(&reply);
        views.insert(j, j_next);
        views.insert(i, i_next);
        stats.exchanges += 1;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(owner: u64, m: usize, entries: &[(u64, u32)]) -> View {
        View::from_entries(NodeId(owner), m, entries.iter().map(|&(id, age)| NeighborEntry::new(id, age)))
    }

    #[test]
    fn initiate_picks_oldest() {
        let v = view(1, 8, &[(5, 3), (9, 7)]);
        assert_eq!(v.shuffle_initiate(), Some((NodeId(9), vec![NeighborEntry::new(5, 3)])));
    }

    #[test]
    fn initiate_ties_go_to_smaller_id() {
        let v = view(1, 8, &[(9, 2), (5, 2)]);
        assert_eq!(v.shuffle_initiate(), Some((NodeId(5), vec![NeighborEntry::new(9, 2)])));
        // Same answer regardless of entry order.
        let w = view(1, 8, &[(5, 2), (9, 2)]);
        assert_eq!(w.shuffle_initiate().unwrap().0, NodeId(5));
    }

    #[test]
    fn initiate_on_empty_view() {
        assert_eq!(View::empty(NodeId(1), 4).shuffle_initiate(), None);
    }

    #[test]
    fn receive_hand_trace() {
        let v = view(3, 3, &[(1, 4), (2, 1)]);
        let (reply, updated) = v.shuffle_receive(&[NeighborEntry::new(7, 0)], NodeId(7));
        assert_eq!(reply, vec![NeighborEntry::new(1, 4), NeighborEntry::new(2, 1)]);
        assert_eq!(updated.entries(), &[NeighborEntry::new(7, 0), NeighborEntry::new(1, 4), NeighborEntry::new(2, 1)]);
    }

    #[test]
    fn receive_discards_pointer_to_self_and_sender() {
        let v = view(3, 4, &[(7, 2), (2, 1)]);
        let (reply, updated) = v.shuffle_receive(&[NeighborEntry::new(3, 0), NeighborEntry::new(8, 1)], NodeId(7));
        assert_eq!(reply, vec![NeighborEntry::new(2, 1)]);
        assert!(!updated.contains(NodeId(3)));
        assert!(updated.contains(NodeId(8)));
    }

    #[test]
    fn receive_truncates_old_entries_oldest_last() {
        let v = view(3, 3, &[(1, 9), (2, 1), (4, 5)]);
        let (_, updated) = v.shuffle_receive(&[NeighborEntry::new(7, 0), NeighborEntry::new(8, 6)], NodeId(7));
        assert_eq!(updated.entries(), &[NeighborEntry::new(7, 0), NeighborEntry::new(8, 6), NeighborEntry::new(2, 1)]);
    }

    #[test]
    fn age_tick_examples() {
        assert_eq!(view(1, 4, &[(5, 0)]).age_tick(4).entries(), &[NeighborEntry::new(5, 1)]);
        assert!(view(1, 4, &[(5, 4)]).age_tick(4).is_empty());
        assert!(View::empty(NodeId(1), 4).age_tick(4).is_empty());
    }

    #[test]
    fn sample_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = view(0, 8, &[(1, 0), (2, 0), (3, 0), (4, 0), (5, 0), (6, 0), (7, 0), (8, 0)]);
        let s = v.sample_neighbors(3, &[], &mut rng);
        assert_eq!(s.ids.len(), 3);
        assert!(!s.short);
        let distinct: HashSet<_> = s.ids.iter().collect();
        assert_eq!(distinct.len(), 3);

        let two = view(0, 8, &[(1, 0), (2, 0)]);
        let s = two.sample_neighbors(3, &[], &mut rng);
        assert_eq!((s.ids.len(), s.short), (2, true));

        let s = two.sample_neighbors(3, &[NodeId(1), NodeId(2)], &mut rng);
        assert!(s.ids.is_empty() && s.short);
    }

    #[test]
    fn live_set_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut live = LiveSet::new();
        for i in 1..=100 {
            live.insert(NodeId(i));
        }
        live.remove(NodeId(50));
        assert_eq!(live.len(), 99);
        for _ in 0..200 {
            let s = live.sample(5, &[NodeId(1), NodeId(2)], &mut rng);
            assert_eq!(s.ids.len(), 5);
            assert!(s.ids.iter().all(|id| live.contains(*id) && id.0 > 2));
            assert_eq!(s.ids.iter().collect::<HashSet<_>>().len(), 5);
        }
        let s = live.sample(200, &[], &mut rng);
        assert_eq!((s.ids.len(), s.short), (99, true));
    }

    #[test]
    fn bootstrap_copies_contacts() {
        let a = view(10, 3, &[(1, 5), (2, 0)]);
        let b = view(11, 3, &[(99, 1), (3, 2)]);
        let v = bootstrap_view(NodeId(99), 3, &[&a, &b]);
        assert_eq!(v.ids().collect::<Vec<_>>(), vec![NodeId(10), NodeId(11), NodeId(1)]);
    }

    #[test]
    fn cyclon_in_degree_is_random_graph_like() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, m) = (1024u64, 20usize);
        let mut live = LiveSet::new();
        for i in 1..=n {
            live.insert(NodeId(i));
        }
        let mut views: BTreeMap<NodeId, View> =
            (1..=n).map(|i| (NodeId(i), random_view(NodeId(i), m, &live, &mut rng))).collect();
        for _ in 0..50 {
            cyclon_cycle(&mut views, m as u32);
        }
        let mut indeg: HashMap<NodeId, f64> = (1..=n).map(|i| (NodeId(i), 0.0)).collect();
        for v in views.values() {
            for id in v.ids() {
                *indeg.get_mut(&id).unwrap() += 1.0;
            }
        }
        let mean = indeg.values().sum::<f64>() / n as f64;
        let var = indeg.values().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let cv = var.sqrt() / mean;
        assert!(cv < 0.35, "in-degree cv {cv}");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Receive(Vec<(u64, u32)>, u64),
        Tick,
        Initiate,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (proptest::collection::vec((0u64..15, 0u32..6), 0..10), 0u64..15).prop_map(|(e, f)| Op::Receive(e, f)),
            Just(Op::Tick),
            Just(Op::Initiate),
        ]
    }

    proptest! {
        #[test]
        fn view_invariants_hold(m in 1usize..8, ops in proptest::collection::vec(op(), 0..30)) {
            let mut v = View::empty(NodeId(3), m);
            for op in ops {
                v = match op {
                    Op::Receive(entries, from) => {
                        let offer: Vec<_> = entries.into_iter().map(|(id, age)| NeighborEntry::new(id, age)).collect();
                        let (reply, next) = v.shuffle_receive(&offer, NodeId(from));
                        prop_assert!(reply.iter().all(|e| e.id != NodeId(from)));
                        next
                    }
                    Op::Tick => v.age_tick(m as u32),
                    Op::Initiate => match v.shuffle_initiate() {
                        Some((t, offer)) => {
                            prop_assert!(offer.iter().all(|e| e.id != t));
                            View::from_entries(NodeId(3), m, offer)
                        }
                        None => v,
                    },
                };
                prop_assert!(v.len() <= m);
                prop_assert!(!v.contains(NodeId(3)));
                let distinct: HashSet<_> = v.ids().collect();
                prop_assert_eq!(distinct.len(), v.len());
            }
        }
    }
}
