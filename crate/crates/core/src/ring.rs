//! Carousel: versioned configuration tables on a 32-bit hash ring and
//! primary selection from the parent block hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Bound;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{digest, Digest};
use crate::wire::{Reader, Wire, WireError, Writer};

/// Number of virtual points per node when a caller does not choose one.
pub const DEFAULT_VIRTUAL_COUNT: u32 = 16;

const RING_SIZE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl Wire for NodeId {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(NodeId(r.u64()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashPoint(pub u32);

impl HashPoint {
    pub fn wrapping_add(self, by: u32) -> HashPoint {
        HashPoint(self.0.wrapping_add(by))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Round-robin interleaving: every node owns the same total arc.
    #[default]
    Equidistant,
    /// `(2^32 / i) * q mod 2^32` for 1-based slot `i` and point index `q`.
    Alg2Literal,
}

impl Placement {
    fn tag(self) -> u8 {
        match self {
            Placement::Equidistant => 0,
            Placement::Alg2Literal => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipChange {
    Join(NodeId),
    Exit(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RingError {
    #[error("membership is empty")]
    EmptyMembership,
    #[error("node {0} is already a member")]
    DuplicateNodeId(NodeId),
    #[error("node {0} is not a member")]
    UnknownNode(NodeId),
    #[error("exit would leave no members")]
    MembershipUnderflow,
    #[error("virtual_count must be at least 1")]
    InvalidVirtualCount,
    #[error("ring has no free point for another virtual node")]
    PointCollision,
    #[error("malformed table encoding: {0}")]
    Malformed(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    /// 1-based slot used by the literal placement.
    slot: u32,
    points: BTreeSet<HashPoint>,
}

/// Versioned membership table. Immutable: changes produce a new table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigTable {
    version: u64,
    virtual_count: u32,
    placement: Placement,
    entries: BTreeMap<NodeId, Entry>,
    ring: BTreeMap<HashPoint, NodeId>,
}

/// Maps a protocol digest onto the ring: the first four bytes, big-endian.
pub fn map_to_ring(d: &Digest) -> HashPoint {
    let b = d.as_bytes();
    HashPoint(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn equidistant_point(index: u64, q: u64, n: u64, z: u64) -> HashPoint {
    let k = index + q * n;
    HashPoint(((k * RING_SIZE) / (n * z) % RING_SIZE) as u32)
}

fn literal_point(slot: u64, q: u64) -> HashPoint {
    HashPoint(((RING_SIZE / slot) * q % RING_SIZE) as u32)
}

/// Inserts `p`, probing forward by one until a free point is found.
fn claim(ring: &mut BTreeMap<HashPoint, NodeId>, mut p: HashPoint, owner: NodeId) -> Result<HashPoint, RingError> {
    if ring.len() as u64 >= RING_SIZE {
        return Err(RingError::PointCollision);
    }
    while ring.contains_key(&p) {
        p = p.wrapping_add(1);
    }
    ring.insert(p, owner);
    Ok(p)
}

pub fn setup_table(node_ids: &[NodeId], virtual_count: u32, placement: Placement) -> Result<ConfigTable, RingError> {
    if node_ids.is_empty() {
        return Err(RingError::EmptyMembership);
    }
    if virtual_count == 0 {
        return Err(RingError::InvalidVirtualCount);
    }
    let mut entries = BTreeMap::new();
    for (i, id) in node_ids.iter().enumerate() {
        let entry = Entry { slot: i as u32 + 1, points: BTreeSet::new() };
        if entries.insert(*id, entry).is_some() {
            return Err(RingError::DuplicateNodeId(*id));
        }
    }
    let mut table = ConfigTable { version: 0, virtual_count, placement, entries, ring: BTreeMap::new() };
    match placement {
        Placement::Equidistant => table.place_equidistant(node_ids)?,
        Placement::Alg2Literal => {
            for id in node_ids {
                table.place_literal(*id)?;
            }
        }
    }
    Ok(table)
}

pub fn select_primary(table: &ConfigTable, parent_hash: &Digest) -> Result<NodeId, RingError> {
    table.owner_after(map_to_ring(parent_hash))
}

pub fn apply_membership_change(table: &ConfigTable, change: MembershipChange) -> Result<ConfigTable, RingError> {
    let mut next = table.clone();
    next.version += 1;
    match change {
        MembershipChange::Join(id) => {
            if next.entries.contains_key(&id) {
                return Err(RingError::DuplicateNodeId(id));
            }
            let used: BTreeSet<u32> = next.entries.values().map(|e| e.slot).collect();
            let slot = (1..).find(|s| !used.contains(s)).expect("slot space exhausted");
            next.entries.insert(id, Entry { slot, points: BTreeSet::new() });
            match next.placement {
                Placement::Equidistant => next.replace_all()?,
                Placement::Alg2Literal => next.place_literal(id)?,
            }
        }
        MembershipChange::Exit(id) => {
            let entry = next.entries.get(&id).ok_or(RingError::UnknownNode(id))?;
            if next.entries.len() == 1 {
                return Err(RingError::MembershipUnderflow);
            }
            for p in entry.points.clone() {
                next.ring.remove(&p);
            }
            next.entries.remove(&id);
            if next.placement == Placement::Equidistant {
                next.replace_all()?;
            }
        }
    }
    Ok(next)
}

impl ConfigTable {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn virtual_count(&self) -> u32 {
        self.virtual_count
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Members in ascending id order.
    pub fn members(&self) -> Vec<NodeId> {
        self.entries.keys().copied().collect()
    }

    pub fn points_of(&self, id: NodeId) -> Option<&BTreeSet<HashPoint>> {
        self.entries.get(&id).map(|e| &e.points)
    }

    /// All points with their owners, in ring order.
    pub fn points(&self) -> impl Iterator<Item = (HashPoint, NodeId)> + '_ {
        self.ring.iter().map(|(p, id)| (*p, *id))
    }

    /// Largest tolerated fault count for the current membership.
    pub fn fault_bound(&self) -> usize {
        self.entries.len().saturating_sub(1) / 3
    }

    /// Owner of the smallest point strictly greater than `target`, wrapping
    /// to the smallest point on the ring.
    pub fn owner_after(&self, target: HashPoint) -> Result<NodeId, RingError> {
        self.ring
            .range((Bound::Excluded(target), Bound::Unbounded))
            .next()
            .or_else(|| self.ring.iter().next())
            .map(|(_, id)| *id)
            .ok_or(RingError::EmptyMembership)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.to_bytes()
    }

    pub fn digest(&self) -> Digest {
        digest(&self.canonical_bytes())
    }

    fn place_equidistant(&mut self, order: &[NodeId]) -> Result<(), RingError> {
        let n = order.len() as u64;
        let z = self.virtual_count as u64;
        if n * z > RING_SIZE {
            return Err(RingError::PointCollision);
        }
        for (i, id) in order.iter().enumerate() {
            for q in 0..z {
                let p = claim(&mut self.ring, equidistant_point(i as u64, q, n, z), *id)?;
                self.entries.get_mut(id).expect("member").points.insert(p);
            }
        }
        Ok(())
    }

    fn replace_all(&mut self) -> Result<(), RingError> {
        self.ring.clear();
        for e in self.entries.values_mut() {
            e.points.clear();
        }
        let order = self.members();
        self.place_equidistant(&order)
    }

    fn place_literal(&mut self, id: NodeId) -> Result<(), RingError> {
        let slot = self.entries[&id].slot as u64;
        for q in 1..=self.virtual_count as u64 {
            let p = claim(&mut self.ring, literal_point(slot, q), id)?;
            self.entries.get_mut(&id).expect("member").points.insert(p);
        }
        Ok(())
    }
}

impl Wire for ConfigTable {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.version).u32(self.virtual_count).u8(self.placement.tag());
        w.len(self.entries.len());
        for (id, e) in &self.entries {
            w.put(id).u32(e.slot).len(e.points.len());
            for p in &e.points {
                w.u32(p.0);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let version = r.u64()?;
        let virtual_count = r.u32()?;
        let placement = match r.u8()? {
            0 => Placement::Equidistant,
            1 => Placement::Alg2Literal,
            tag => return Err(WireError::InvalidTag { what: "placement", tag }),
        };
        let n = r.length()?;
        let mut entries = BTreeMap::new();
        let mut ring = BTreeMap::new();
        for _ in 0..n {
            let id: NodeId = r.get()?;
            let slot = r.u32()?;
            let count = r.length()?;
            let mut points = BTreeSet::new();
            for _ in 0..count {
                let p = HashPoint(r.u32()?);
                points.insert(p);
                ring.insert(p, id);
            }
            entries.insert(id, Entry { slot, points });
        }
        Ok(ConfigTable { version, virtual_count, placement, entries, ring })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u64) -> Vec<NodeId> {
        (1..=n).map(NodeId).collect()
    }

    fn digest_with_prefix(prefix: u32) -> Digest {
        let mut b = [0u8; 32];
        b[..4].copy_from_slice(&prefix.to_be_bytes());
        Digest(b)
    }

    /// Arc owned by each node: gap from the preceding point to each of its points.
    fn arc_shares(t: &ConfigTable) -> BTreeMap<NodeId, u64> {
        let pts: Vec<_> = t.points().collect();
        let mut out = BTreeMap::new();
        for (k, (p, id)) in pts.iter().enumerate() {
            let prev = pts[(k + pts.len() - 1) % pts.len()].0;
            let gap = (p.0 as u64 + RING_SIZE - prev.0 as u64) % RING_SIZE;
            let gap = if pts.len() == 1 { RING_SIZE } else { gap };
            *out.entry(*id).or_insert(0) += gap;
        }
        out
    }

    #[test]
    fn single_node_sits_at_zero() {
        let t = setup_table(&ids(1), 1, Placement::Equidistant).unwrap();
        assert_eq!(t.points().collect::<Vec<_>>(), vec![(HashPoint(0), NodeId(1))]);
        assert_eq!(t.version(), 0);
    }

    #[test]
    fn four_nodes_equidistant_have_exact_shares() {
        let t = setup_table(&ids(4), 16, Placement::Equidistant).unwrap();
        assert_eq!(t.points().count(), 64);
        for share in arc_shares(&t).values() {
            assert!(share.abs_diff(RING_SIZE / 4) <= 1);
        }
    }

    #[test]
    fn literal_points_cover_raw_formula_and_match_probe_oracle() {
        let t = setup_table(&ids(4), 16, Placement::Alg2Literal).unwrap();
        let final_set: BTreeSet<u32> = t.points().map(|(p, _)| p.0).collect();
        assert_eq!(final_set.len(), 64);
        let mut raw = BTreeSet::new();
        let mut oracle = BTreeSet::new();
        for i in 1..=4u64 {
            for q in 1..=16u64 {
                let v = ((RING_SIZE / i) * q % RING_SIZE) as u32;
                raw.insert(v);
                let mut p = v;
                while oracle.contains(&p) {
                    p = p.wrapping_add(1);
                }
                oracle.insert(p);
            }
        }
        assert!(raw.is_subset(&final_set));
        assert_eq!(final_set, oracle);
    }

    #[test]
    fn setup_errors() {
        assert_eq!(setup_table(&[], 4, Placement::Equidistant), Err(RingError::EmptyMembership));
        assert_eq!(
            setup_table(&[NodeId(1), NodeId(1)], 4, Placement::Equidistant),
            Err(RingError::DuplicateNodeId(NodeId(1)))
        );
        assert_eq!(setup_table(&ids(2), 0, Placement::Equidistant), Err(RingError::InvalidVirtualCount));
    }

    #[test]
    fn map_to_ring_prefixes() {
        assert_eq!(map_to_ring(&Digest([0; 32])), HashPoint(0));
        assert_eq!(map_to_ring(&digest_with_prefix(u32::MAX)), HashPoint(u32::MAX));
    }

    #[test]
    fn exact_hit_advances_to_next_point() {
        let t = setup_table(&ids(4), 16, Placement::Equidistant).unwrap();
        let pts: Vec<_> = t.points().collect();
        let (p, owner) = pts[5];
        let next_owner = pts[6].1;
        assert_ne!(owner, next_owner);
        assert_eq!(select_primary(&t, &digest_with_prefix(p.0)).unwrap(), next_owner);
        // Past the last point wraps to the first.
        let last = pts.last().unwrap().0;
        assert_eq!(select_primary(&t, &digest_with_prefix(last.0)).unwrap(), pts[0].1);
    }

    #[test]
    fn literal_exit_then_join_restores_points() {
        let t = setup_table(&ids(4), 16, Placement::Alg2Literal).unwrap();
        for n in 1..=4 {
            let out = apply_membership_change(&t, MembershipChange::Exit(NodeId(n))).unwrap();
            let back = apply_membership_change(&out, MembershipChange::Join(NodeId(n))).unwrap();
            assert_eq!(back.version(), 2);
            let a: Vec<_> = t.points().collect();
            let b: Vec<_> = back.points().collect();
            assert_eq!(a, b, "node {n}");
        }
    }

    #[test]
    fn join_rebalances_equidistant() {
        let t = setup_table(&ids(4), 16, Placement::Equidistant).unwrap();
        let t5 = apply_membership_change(&t, MembershipChange::Join(NodeId(9))).unwrap();
        assert_eq!(t5.len(), 5);
        assert_eq!(t5.version(), 1);
        let shares = arc_shares(&t5);
        let total: u64 = shares.values().sum();
        assert_eq!(total, RING_SIZE);
        for share in shares.values() {
            // Each of the Z gaps is off by less than one from 2^32 / (N Z).
            assert!(share.abs_diff(RING_SIZE / 5) <= 16, "{share}");
        }
    }

    #[test]
    fn exit_of_primary_never_selected_again() {
        let t = setup_table(&ids(4), 16, Placement::Equidistant).unwrap();
        let d = digest(b"parent");
        let primary = select_primary(&t, &d).unwrap();
        let t2 = apply_membership_change(&t, MembershipChange::Exit(primary)).unwrap();
        for i in 0..500u32 {
            let d = digest(&i.to_be_bytes());
            assert_ne!(select_primary(&t2, &d).unwrap(), primary);
        }
    }

    #[test]
    fn membership_change_errors() {
        let t = setup_table(&ids(2), 4, Placement::Equidistant).unwrap();
        assert_eq!(
            apply_membership_change(&t, MembershipChange::Exit(NodeId(7))),
            Err(RingError::UnknownNode(NodeId(7)))
        );
        assert_eq!(
            apply_membership_change(&t, MembershipChange::Join(NodeId(1))),
            Err(RingError::DuplicateNodeId(NodeId(1)))
        );
        let t1 = apply_membership_change(&t, MembershipChange::Exit(NodeId(1))).unwrap();
        assert_eq!(
            apply_membership_change(&t1, MembershipChange::Exit(NodeId(2))),
            Err(RingError::MembershipUnderflow)
        );
    }

    #[test]
    fn canonical_bytes_round_trip() {
        let t = setup_table(&ids(5), 8, Placement::Alg2Literal).unwrap();
        let back = ConfigTable::from_bytes(&t.canonical_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.digest(), t.digest());
    }
}
