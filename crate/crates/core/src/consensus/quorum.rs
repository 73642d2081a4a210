//! Quorum thresholds and distinct-sender vote tallies.
//!
//! Thresholds named `*_peers` count votes from other members only; the
//! caller separately requires its own vote where the flow demands one.

use std::collections::{BTreeMap, BTreeSet};

use crate::ring::NodeId;

/// `f = floor((n - 1) / 3)`.
pub fn fault_bound(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// Distinct consistent senders, self included, needed for TRANSMIT, COMMIT
/// and CHECKPOINT.
///
/// This is `2f + 1` whenever `n = 3f + 1`. For other sizes it is raised to
/// `ceil((n + f + 1) / 2)` so that any two quorums share at least `f + 1`
/// members; plain `2f + 1` at, say, `n = 6` would admit two disjoint
/// quorums.
pub fn agreement_quorum(n: usize) -> usize {
    let f = fault_bound(n);
    (2 * f + 1).max((n + f + 2) / 2).min(n.max(1))
}

/// Peer AGR / AGR_C votes needed before a join advances: `2f`.
pub fn join_peers(f: usize) -> usize {
    2 * f
}

/// Peer votes needed for exit and removal flows: `2f - 1`, floored at zero.
pub fn exit_peers(f: usize) -> usize {
    (2 * f).saturating_sub(1)
}

/// Consistent replies a client needs: `f + 1`.
pub fn client_quorum(f: usize) -> usize {
    f + 1
}

/// Peer attestations that convict a repudiating sender: `n - f - 1`.
pub fn dispute_peers(n: usize, f: usize) -> usize {
    crate::auth::dispute_threshold(n, f)
}

/// Sources that must vouch for unverifiable state (sync, welcome): `f + 1`.
pub fn vouch_quorum(f: usize) -> usize {
    f + 1
}

/// Distinct senders per key. Duplicate votes are ignored.
#[derive(Debug, Clone)]
pub struct Tally<K: Ord> {
    votes: BTreeMap<K, BTreeSet<NodeId>>,
}

impl<K: Ord> Default for Tally<K> {
    fn default() -> Self {
        Self { votes: BTreeMap::new() }
    }
}

impl<K: Ord + Clone> Tally<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a vote and returns the key's distinct-sender count.
    pub fn add(&mut self, key: K, sender: NodeId) -> usize {
        let set = self.votes.entry(key).or_default();
        set.insert(sender);
        set.len()
    }

    pub fn count(&self, key: &K) -> usize {
        self.votes.get(key).map_or(0, |s| s.len())
    }

    /// Votes for `key` excluding the listed ids.
    pub fn count_excluding(&self, key: &K, exclude: &[NodeId]) -> usize {
        self.votes.get(key).map_or(0, |s| s.iter().filter(|id| !exclude.contains(id)).count())
    }

    pub fn voters(&self, key: &K) -> impl Iterator<Item = NodeId> + '_ {
        self.votes.get(key).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn has_voted(&self, key: &K, sender: NodeId) -> bool {
        self.votes.get(key).is_some_and(|s| s.contains(&sender))
    }

    pub fn remove(&mut self, key: &K) {
        self.votes.remove(key);
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K) -> bool) {
        self.votes.retain(|k, _| keep(k));
    }

    /// Drops every vote cast by `sender`.
    pub fn forget_sender(&mut self, sender: NodeId) {
        for set in self.votes.values_mut() {
            set.remove(&sender);
        }
    }

    pub fn clear(&mut self) {
        self.votes.clear();
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.votes.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_bounds() {
        let got: Vec<usize> = (1..=10).map(fault_bound).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }

    #[test]
    fn agreement_quorum_matches_two_f_plus_one_on_exact_sizes() {
        for f in 0..10 {
            assert_eq!(agreement_quorum(3 * f + 1), 2 * f + 1);
        }
    }

    #[test]
    fn agreement_quorums_intersect_in_f_plus_one() {
        for n in 1..=64 {
            let q = agreement_quorum(n);
            assert!(q <= n);
            assert!(2 * q - n > fault_bound(n), "n={n} q={q}");
        }
    }

    #[test]
    fn tally_counts_distinct_senders() {
        let mut t = Tally::new();
        assert_eq!(t.add("a", NodeId(1)), 1);
        assert_eq!(t.add("a", NodeId(1)), 1);
        assert_eq!(t.add("a", NodeId(2)), 2);
        assert_eq!(t.add("b", NodeId(2)), 1);
        assert_eq!(t.count_excluding(&"a", &[NodeId(2)]), 1);
        t.forget_sender(NodeId(2));
        assert_eq!(t.count(&"a"), 1);
        assert_eq!(t.count(&"b"), 0);
    }
}
