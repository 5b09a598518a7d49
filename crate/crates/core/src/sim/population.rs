use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::membership::{bootstrap_view, cyclon_cycle, random_view, CycleStats, LiveSet, MembershipMode, View};
use crate::protocol::NodeState;
use crate::types::{NodeId, ObjectValue, Tag, Versioned};

use super::config::{ExperimentConfig, Resolved};

/// The live node set. Its size stays at `n` across churn ticks; departed ids
/// are never reused.
#[derive(Debug, Clone)]
pub struct Population {
    pub nodes: BTreeMap<NodeId, NodeState>,
    pub live: LiveSet,
    next_id: u64,
    n: usize,
    mode: MembershipMode,
    view_size: usize,
    bootstrap_fanout: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChurnOutcome {
    pub departed: Vec<NodeId>,
    pub joined: Vec<NodeId>,
}

impl Population {
    /// `n` fresh nodes; the first `initial_holders` (in a random order) hold
    /// the default value, the rest hold nothing.
    pub fn init<R: Rng>(cfg: &ExperimentConfig, res: &Resolved, rng: &mut R) -> Self {
        let n = cfg.params.n as usize;
        let mut pop = Population {
            nodes: BTreeMap::new(),
            live: LiveSet::new(),
            next_id: 1,
            n,
            mode: cfg.membership.mode,
            view_size: cfg.membership.view_size,
            bootstrap_fanout: cfg.membership.bootstrap_fanout,
        };
        let ids: Vec<NodeId> = (0..n).map(|_| pop.fresh_id()).collect();
        for &id in &ids {
            pop.live.insert(id);
        }
        let holders: std::collections::HashSet<usize> =
            index::sample(rng, n, res.initial_holders as usize).into_iter().collect();
        for (i, &id) in ids.iter().enumerate() {
            let value = if holders.contains(&i) { ObjectValue::initial() } else { ObjectValue::Bottom };
            let view = match pop.mode {
                MembershipMode::Cyclon => random_view(id, pop.view_size, &pop.live, rng),
                MembershipMode::Perfect => View::empty(id, pop.view_size),
            };
            pop.nodes.insert(id, NodeState::new(id, Versioned::new(value, Tag::INITIAL), view));
        }
        pop
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn target_size(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.live.contains(id)
    }

    /// Replaces `fraction * n` uniformly chosen nodes with fresh ones. The
    /// fractional part is realised as one extra replacement with matching
    /// probability.
    pub fn churn_tick<R: Rng>(&mut self, fraction: f64, rng: &mut R) -> ChurnOutcome {
        let expected = fraction * self.n as f64;
        let mut count = expected.floor() as usize;
        let frac = expected - expected.floor();
        if frac > 0.0 && rng.random_bool(frac) {
            count += 1;
        }
        let count = count.min(self.live.len());
        if count == 0 {
            return ChurnOutcome::default();
        }
        let departed: Vec<NodeId> =
            index::sample(rng, self.live.len(), count).into_iter().map(|i| self.live.as_slice()[i]).collect();
        for id in &departed {
            self.live.remove(*id);
            self.nodes.remove(id);
        }
        let mut joined = Vec::with_capacity(count);
        for _ in 0..count {
            let id = self.fresh_id();
            let view = match self.mode {
                MembershipMode::Cyclon => {
                    let contacts = self.live.sample(self.bootstrap_fanout, &[], rng);
                    let views: Vec<&View> = contacts.ids.iter().map(|c| &self.nodes[c].view).collect();
                    bootstrap_view(id, self.view_size, &views)
                }
                MembershipMode::Perfect => View::empty(id, self.view_size),
            };
            self.live.insert(id);
            self.nodes.insert(id, NodeState::new(id, Versioned::default(), view));
            joined.push(id);
        }
        ChurnOutcome { departed, joined }
    }

    /// One cyclon cycle over every live node. No-op in perfect mode.
    pub fn membership_cycle(&mut self, age_limit: u32) -> CycleStats {
        if self.mode != MembershipMode::Cyclon {
            return CycleStats::default();
        }
        let mut views: BTreeMap<NodeId, View> = self
            .nodes
            .iter_mut()
            .map(|(id, node)| (*id, std::mem::replace(&mut node.view, View::empty(*id, 0))))
            .collect();
        let stats = cyclon_cycle(&mut views, age_limit);
        for (id, view) in views {
            self.nodes.get_mut(&id).expect("views only for live nodes").view = view;
        }
        stats
    }

    /// Live nodes holding a real value under a tag at least `floor`.
    pub fn count_at_least(&self, floor: Tag) -> usize {
        self.nodes.values().filter(|n| !n.held().value.is_bottom() && n.tag() >= floor).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quorum::SystemParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: u64, beta: f64, holders: Option<u64>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(SystemParams { n, c: 0.0, delta: 10.0, beta, k: 2 }, 10.0);
        cfg.initial_holders = holders;
        cfg
    }

    fn holders(pop: &Population) -> usize {
        pop.nodes.values().filter(|n| !n.held().value.is_bottom()).count()
    }

    #[test]
    fn init_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(100, 1.0, Some(100));
        let pop = Population::init(&c, &c.resolve().unwrap(), &mut rng);
        assert_eq!((pop.len(), holders(&pop)), (100, 100));

        let c = cfg(100, 3.0, Some(30));
        let pop = Population::init(&c, &c.resolve().unwrap(), &mut rng);
        assert_eq!(holders(&pop), 30);
        assert!(pop.nodes.keys().all(|id| *id != NodeId::RESERVED));

        assert!(cfg(100, 3.0, Some(10)).resolve().is_err());
    }

    #[test]
    fn churn_keeps_size_and_never_reuses_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = cfg(100, 1.0, None);
        c.membership.mode = MembershipMode::Cyclon;
        let mut pop = Population::init(&c, &c.resolve().unwrap(), &mut rng);
        assert!(pop.churn_tick(0.0, &mut rng).departed.is_empty());
        let mut seen: std::collections::HashSet<NodeId> = pop.nodes.keys().copied().collect();
        for _ in 0..20 {
            let out = pop.churn_tick(0.1, &mut rng);
            assert_eq!(out.departed.len(), 10);
            assert_eq!(pop.len(), 100);
            assert_eq!(pop.live.len(), 100);
            for id in out.joined {
                assert!(seen.insert(id), "id {id} reused");
                assert!(pop.nodes[&id].held().value.is_bottom());
            }
            pop.membership_cycle(20);
        }
    }

    #[test]
    fn fractional_churn_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(100, 1.0, None);
        let mut pop = Population::init(&c, &c.resolve().unwrap(), &mut rng);
        let ticks = 4000;
        let mut total = 0usize;
        for _ in 0..ticks {
            let k = pop.churn_tick(0.015, &mut rng).departed.len();
            assert!(k == 1 || k == 2);
            total += k;
        }
        let mean = total as f64 / ticks as f64;
        // each tick is 1 + Bernoulli(0.5)
        let sigma = (0.25f64 / ticks as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * sigma, "mean {mean}");
    }
}
