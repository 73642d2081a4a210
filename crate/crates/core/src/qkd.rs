//! Simulated QKD key delivery: directional pairwise pools of one-time key
//! units, drawn by the sender and looked up by serial on the receiver side.
//!
//! Key material for `(sender, receiver, serial)` is a pure function of the
//! pool seed, so every node's local pool agrees with its peers' without any
//! shared state. A pair's queue is the serial range `[next, provisioned)`;
//! units are materialised on demand.

use std::collections::BTreeMap;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::ring::NodeId;

/// 383 diagonal bits + 128 pad bits + 1 spare bit.
pub const DEFAULT_UNIT_BITS: u32 = 512;

/// Receiver-side lookups may run at most this far past the locally known
/// provisioning before being refused as unknown.
const MAX_LOOKAHEAD: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    New,
    Transmit,
    Commit,
    Checkpoint,
    Join,
    Exit,
    Unresponsive,
    PrimaryMissing,
    Probe,
    Dispute,
}

impl Phase {
    pub const ALL: [Phase; 10] = [
        Phase::New,
        Phase::Transmit,
        Phase::Commit,
        Phase::Checkpoint,
        Phase::Join,
        Phase::Exit,
        Phase::Unresponsive,
        Phase::PrimaryMissing,
        Phase::Probe,
        Phase::Dispute,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::New => "NEW",
            Phase::Transmit => "TRANSMIT",
            Phase::Commit => "COMMIT",
            Phase::Checkpoint => "CHECKPOINT",
            Phase::Join => "JOIN",
            Phase::Exit => "EXIT",
            Phase::Unresponsive => "UNRESP",
            Phase::PrimaryMissing => "PRIMARY_MISSING",
            Phase::Probe => "SUR",
            Phase::Dispute => "DISPUTE",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QkdError {
    #[error("at least two members are required")]
    InsufficientMembers,
    #[error("no key pair {0} -> {1}")]
    UnknownPair(NodeId, NodeId),
    #[error("key pool {0} -> {1} exhausted")]
    KeyExhausted(NodeId, NodeId),
    #[error("serial {serial} was never provisioned for {sender} -> {receiver}")]
    UnknownSerial { sender: NodeId, receiver: NodeId, serial: u64 },
    #[error("round {0} is unknown or still open")]
    UnknownRound(u64),
    #[error("unit length must be a positive multiple of 8 bits")]
    InvalidUnitBits,
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyUnit {
    pub serial: u64,
    bits: Vec<u8>,
}

impl KeyUnit {
    pub fn from_bytes(serial: u64, bits: Vec<u8>) -> Self {
        Self { serial, bits }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit_len(&self) -> usize {
        self.bits.len() * 8
    }

    /// Bit `i`, most significant bit of byte 0 first.
    pub fn bit(&self, i: usize) -> bool {
        (self.bits[i / 8] >> (7 - i % 8)) & 1 == 1
    }
}

impl fmt::Debug for KeyUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyUnit").field("serial", &self.serial).field("bits", &self.bit_len()).finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct PairState {
    next: u64,
    provisioned: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConsumptionReport {
    pub round: u64,
    pub per_phase: BTreeMap<Phase, u64>,
}

impl ConsumptionReport {
    pub fn count(&self, phase: Phase) -> u64 {
        self.per_phase.get(&phase).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.per_phase.values().sum()
    }

    /// The figure tabulated as per-round consumption: TRANSMIT plus COMMIT.
    pub fn transmit_commit(&self) -> u64 {
        self.count(Phase::Transmit) + self.count(Phase::Commit)
    }

    pub fn merge(&mut self, other: &ConsumptionReport) {
        for (phase, n) in &other.per_phase {
            *self.per_phase.entry(*phase).or_insert(0) += n;
        }
    }

    /// CSV rows `round_id,N,phase,count`, one per phase in label order.
    pub fn csv_rows(&self, n: usize) -> Vec<String> {
        Phase::ALL
            .iter()
            .filter(|p| self.per_phase.contains_key(p))
            .map(|p| format!("{},{},{},{}", self.round, n, p.label(), self.count(*p)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPool {
    seed: u64,
    unit_bits: u32,
    pairs: BTreeMap<(NodeId, NodeId), PairState>,
    /// Pairs of departed members, kept so a rejoin resumes past used serials.
    retired: BTreeMap<(NodeId, NodeId), PairState>,
    consumed: BTreeMap<(NodeId, NodeId, Phase), u64>,
    refilled: BTreeMap<(NodeId, NodeId), u64>,
    auto_refill: Option<u64>,
    open_round: Option<u64>,
    open_tally: BTreeMap<Phase, u64>,
    closed: BTreeMap<u64, BTreeMap<Phase, u64>>,
    initial_units: u64,
}

pub fn provision(members: &[NodeId], units_per_pair: u64, unit_bits: u32, seed: u64) -> Result<KeyPool, QkdError> {
    KeyPool::build(None, members, units_per_pair, unit_bits, seed)
}

impl KeyPool {
    /// The slice of the key network one node holds: pairs with `owner` at
    /// either end.
    pub fn provision_local(
        owner: NodeId,
        members: &[NodeId],
        units_per_pair: u64,
        unit_bits: u32,
        seed: u64,
    ) -> Result<KeyPool, QkdError> {
        Self::build(Some(owner), members, units_per_pair, unit_bits, seed)
    }

    fn build(
        owner: Option<NodeId>,
        members: &[NodeId],
        units_per_pair: u64,
        unit_bits: u32,
        seed: u64,
    ) -> Result<KeyPool, QkdError> {
        if unit_bits == 0 || !unit_bits.is_multiple_of(8) {
            return Err(QkdError::InvalidUnitBits);
        }
        let mut distinct = members.to_vec();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < 2 && owner.is_none() {
            return Err(QkdError::InsufficientMembers);
        }
        let mut pool = KeyPool {
            seed,
            unit_bits,
            pairs: BTreeMap::new(),
            retired: BTreeMap::new(),
            consumed: BTreeMap::new(),
            refilled: BTreeMap::new(),
            auto_refill: None,
            open_round: None,
            open_tally: BTreeMap::new(),
            closed: BTreeMap::new(),
            initial_units: units_per_pair,
        };
        for &a in &distinct {
            for &b in &distinct {
                if a != b && owner.is_none_or(|o| o == a || o == b) {
                    pool.pairs.insert((a, b), PairState { next: 0, provisioned: units_per_pair });
                }
            }
        }
        Ok(pool)
    }

    /// Refill exhausted pairs automatically in chunks of `chunk` units.
    pub fn with_auto_refill(mut self, chunk: Option<u64>) -> Self {
        self.auto_refill = chunk.filter(|c| *c > 0);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn unit_bits(&self) -> u32 {
        self.unit_bits
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn has_pair(&self, sender: NodeId, receiver: NodeId) -> bool {
        self.pairs.contains_key(&(sender, receiver))
    }

    pub fn remaining(&self, sender: NodeId, receiver: NodeId) -> Option<u64> {
        self.pairs.get(&(sender, receiver)).map(|p| p.provisioned - p.next)
    }

    pub fn drawn(&self, sender: NodeId, receiver: NodeId) -> Option<u64> {
        self.pairs.get(&(sender, receiver)).map(|p| p.next)
    }

    pub fn provisioned(&self, sender: NodeId, receiver: NodeId) -> Option<u64> {
        self.pairs.get(&(sender, receiver)).map(|p| p.provisioned)
    }

    pub fn refilled(&self, sender: NodeId, receiver: NodeId) -> u64 {
        self.refilled.get(&(sender, receiver)).copied().unwrap_or(0)
    }

    pub fn consumed(&self, sender: NodeId, receiver: NodeId, phase: Phase) -> u64 {
        self.consumed.get(&(sender, receiver, phase)).copied().unwrap_or(0)
    }

    fn derive(&self, sender: NodeId, receiver: NodeId, serial: u64) -> KeyUnit {
        let mut h = Sha256::new();
        h.update(b"qdbft/qkd-unit/v1");
        h.update(self.seed.to_be_bytes());
        h.update(sender.0.to_be_bytes());
        h.update(receiver.0.to_be_bytes());
        h.update(serial.to_be_bytes());
        let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
        let mut bits = vec![0u8; self.unit_bits as usize / 8];
        rng.fill_bytes(&mut bits);
        KeyUnit { serial, bits }
    }

    /// Removes and returns the head unit of `sender -> receiver`.
    pub fn draw_key(&mut self, sender: NodeId, receiver: NodeId, phase: Phase) -> Result<KeyUnit, QkdError> {
        let auto = self.auto_refill;
        let pair = self.pairs.get_mut(&(sender, receiver)).ok_or(QkdError::UnknownPair(sender, receiver))?;
        if pair.next == pair.provisioned {
            match auto {
                Some(chunk) => {
                    pair.provisioned += chunk;
                    *self.refilled.entry((sender, receiver)).or_insert(0) += chunk;
                }
                None => return Err(QkdError::KeyExhausted(sender, receiver)),
            }
        }
        let pair = self.pairs.get_mut(&(sender, receiver)).expect("present");
        let serial = pair.next;
        pair.next += 1;
        *self.consumed.entry((sender, receiver, phase)).or_insert(0) += 1;
        if self.open_round.is_some() {
            *self.open_tally.entry(phase).or_insert(0) += 1;
        }
        Ok(self.derive(sender, receiver, serial))
    }

    /// The unit a sender used for `serial`, as seen from the receiving end.
    /// Does not consume anything.
    pub fn lookup(&mut self, sender: NodeId, receiver: NodeId, serial: u64) -> Result<KeyUnit, QkdError> {
        let auto = self.auto_refill.is_some();
        let pair = self.pairs.get_mut(&(sender, receiver)).ok_or(QkdError::UnknownPair(sender, receiver))?;
        if serial >= pair.provisioned {
            // The key network delivers to both ends; a receiver learns of a
            // sender-side refill when the first refilled serial shows up.
            if !auto || serial >= pair.provisioned + MAX_LOOKAHEAD {
                return Err(QkdError::UnknownSerial { sender, receiver, serial });
            }
            let added = serial + 1 - pair.provisioned;
            pair.provisioned = serial + 1;
            *self.refilled.entry((sender, receiver)).or_insert(0) += added;
        }
        Ok(self.derive(sender, receiver, serial))
    }

    pub fn refill(&mut self, sender: NodeId, receiver: NodeId, units: u64) -> Result<(), QkdError> {
        let pair = self.pairs.get_mut(&(sender, receiver)).ok_or(QkdError::UnknownPair(sender, receiver))?;
        if units == 0 {
            return Ok(());
        }
        pair.provisioned += units;
        *self.refilled.entry((sender, receiver)).or_insert(0) += units;
        Ok(())
    }

    /// Provisions fresh pairs between `id` and every existing endpoint
    /// (restricted to `owner`'s pairs for local pools). Idempotent.
    pub fn add_member(&mut self, owner: Option<NodeId>, id: NodeId, members: &[NodeId]) {
        for &m in members {
            if m == id {
                continue;
            }
            for pair in [(id, m), (m, id)] {
                if owner.is_none_or(|o| o == pair.0 || o == pair.1) && !self.pairs.contains_key(&pair) {
                    let state =
                        self.retired.remove(&pair).unwrap_or(PairState { next: 0, provisioned: self.initial_units });
                    self.pairs.insert(pair, state);
                }
            }
        }
    }

    /// Retires every pair touching `id`. Consumption history is kept.
    pub fn remove_member(&mut self, id: NodeId) {
        let gone: Vec<(NodeId, NodeId)> = self.pairs.keys().filter(|(a, b)| *a == id || *b == id).copied().collect();
        for pair in gone {
            let state = self.pairs.remove(&pair).expect("listed");
            self.retired.insert(pair, state);
        }
    }

    /// Attributes subsequent draws to `round` until it is closed.
    pub fn begin_round(&mut self, round: u64) {
        if self.open_round != Some(round) {
            self.open_round = Some(round);
            self.open_tally.clear();
        }
    }

    pub fn close_round(&mut self, round: u64) {
        if self.open_round == Some(round) {
            self.open_round = None;
            let tally = std::mem::take(&mut self.open_tally);
            self.closed.insert(round, tally);
        }
    }

    pub fn consumption_report(&self, round: u64) -> Result<ConsumptionReport, QkdError> {
        let tally = self.closed.get(&round).ok_or(QkdError::UnknownRound(round))?;
        Ok(ConsumptionReport { round, per_phase: tally.clone() })
    }

    pub fn closed_rounds(&self) -> impl Iterator<Item = u64> + '_ {
        self.closed.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u64) -> Vec<NodeId> {
        (1..=n).map(NodeId).collect()
    }

    #[test]
    fn two_members_are_directional() {
        let mut pool = provision(&ids(2), 1, DEFAULT_UNIT_BITS, 7).unwrap();
        assert_eq!(pool.pair_count(), 2);
        let ab = pool.draw_key(NodeId(1), NodeId(2), Phase::New).unwrap();
        let ba = pool.draw_key(NodeId(2), NodeId(1), Phase::New).unwrap();
        assert_eq!(ab.bit_len(), 512);
        assert_ne!(ab.bytes(), ba.bytes());
    }

    #[test]
    fn same_seed_same_material() {
        let mut a = provision(&ids(3), 4, DEFAULT_UNIT_BITS, 99).unwrap();
        let mut b = provision(&ids(3), 4, DEFAULT_UNIT_BITS, 99).unwrap();
        assert_eq!(a, b);
        for _ in 0..4 {
            assert_eq!(
                a.draw_key(NodeId(1), NodeId(3), Phase::Commit).unwrap(),
                b.draw_key(NodeId(1), NodeId(3), Phase::Commit).unwrap()
            );
        }
        let mut c = provision(&ids(3), 4, DEFAULT_UNIT_BITS, 100).unwrap();
        assert_ne!(a.lookup(NodeId(1), NodeId(3), 0).unwrap(), c.lookup(NodeId(1), NodeId(3), 0).unwrap());
    }

    #[test]
    fn pair_count_is_ordered_pairs() {
        assert_eq!(provision(&ids(4), 1, 512, 0).unwrap().pair_count(), 12);
        assert_eq!(provision(&ids(1), 1, 512, 0), Err(QkdError::InsufficientMembers));
    }

    #[test]
    fn draw_then_exhaust_then_refill() {
        let (a, b) = (NodeId(1), NodeId(2));
        let mut pool = provision(&ids(2), 3, 512, 1).unwrap();
        assert_eq!(pool.draw_key(a, b, Phase::New).unwrap().serial, 0);
        assert_eq!(pool.remaining(a, b), Some(2));
        pool.draw_key(a, b, Phase::New).unwrap();
        pool.draw_key(a, b, Phase::New).unwrap();
        assert_eq!(pool.draw_key(a, b, Phase::New), Err(QkdError::KeyExhausted(a, b)));
        let before = pool.clone();
        pool.refill(a, b, 0).unwrap();
        assert_eq!(pool, before);
        pool.refill(a, b, 1).unwrap();
        assert_eq!(pool.draw_key(a, b, Phase::New).unwrap().serial, 3);
        assert_eq!(pool.refill(a, NodeId(9), 1), Err(QkdError::UnknownPair(a, NodeId(9))));
    }

    #[test]
    fn receiver_lookup_matches_sender_draw() {
        let mut sender = KeyPool::provision_local(NodeId(1), &ids(3), 2, 512, 5).unwrap().with_auto_refill(Some(2));
        let mut receiver = KeyPool::provision_local(NodeId(2), &ids(3), 2, 512, 5).unwrap().with_auto_refill(Some(2));
        assert_eq!(sender.pair_count(), 4);
        for _ in 0..5 {
            let k = sender.draw_key(NodeId(1), NodeId(2), Phase::Transmit).unwrap();
            assert_eq!(receiver.lookup(NodeId(1), NodeId(2), k.serial).unwrap(), k);
        }
        let mut strict = KeyPool::provision_local(NodeId(2), &ids(3), 2, 512, 5).unwrap();
        assert!(matches!(strict.lookup(NodeId(1), NodeId(2), 2), Err(QkdError::UnknownSerial { .. })));
    }

    #[test]
    fn round_reports() {
        let mut pool = provision(&ids(3), 10, 512, 2).unwrap();
        assert_eq!(pool.consumption_report(1), Err(QkdError::UnknownRound(1)));
        pool.begin_round(1);
        pool.draw_key(NodeId(1), NodeId(2), Phase::New).unwrap();
        pool.draw_key(NodeId(1), NodeId(2), Phase::Transmit).unwrap();
        pool.draw_key(NodeId(2), NodeId(1), Phase::Commit).unwrap();
        assert_eq!(pool.consumption_report(1), Err(QkdError::UnknownRound(1)));
        pool.close_round(1);
        let r = pool.consumption_report(1).unwrap();
        assert_eq!(r.transmit_commit(), 2);
        assert_eq!(r.total(), 3);
        assert_eq!(r.csv_rows(3), vec!["1,3,NEW,1", "1,3,TRANSMIT,1", "1,3,COMMIT,1"]);
    }

    #[test]
    fn membership_updates_pairs() {
        let mut pool = KeyPool::provision_local(NodeId(1), &ids(3), 1, 512, 0).unwrap();
        pool.add_member(Some(NodeId(1)), NodeId(4), &ids(3));
        assert!(pool.has_pair(NodeId(1), NodeId(4)));
        assert!(pool.has_pair(NodeId(4), NodeId(1)));
        assert!(!pool.has_pair(NodeId(2), NodeId(4)));
        pool.remove_member(NodeId(2));
        assert!(!pool.has_pair(NodeId(1), NodeId(2)));
        assert_eq!(pool.pair_count(), 4);
    }
}
