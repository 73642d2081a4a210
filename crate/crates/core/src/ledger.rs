//! Requests, blocks, Merkle commitments, the request pool, and the chain
//! with checkpoint pruning.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::auth::{digest, digest_pair, ClientId, ClientSignature, Digest};
use crate::ring::NodeId;
use crate::wire::{Reader, Wire, WireError, Writer};

pub const DEFAULT_BATCH_LIMIT: usize = 100;
pub const DEFAULT_CHECKPOINT_THRESHOLD: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("merkle tree needs at least one leaf")]
    EmptyLeaves,
    #[error("parent hash does not match the tip at height {tip}")]
    ParentMismatch { tip: u64 },
    #[error("expected height {expected}, got {got}")]
    HeightGap { expected: u64, got: u64 },
    #[error("block at height {0} is already on the chain")]
    DuplicateBlock(u64),
    #[error("block body does not match its header")]
    InvalidBody,
    #[error("request {0:?} was already approved in an earlier block")]
    DuplicateRequest(Digest),
    #[error("only {have} blocks since the last checkpoint, need {need}")]
    ThresholdNotReached { have: u64, need: u64 },
    #[error("body at height {0} was pruned")]
    BodyPruned(u64),
    #[error("no block at height {0}")]
    UnknownHeight(u64),
    #[error("malformed encoding: {0}")]
    Malformed(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub operation: Vec<u8>,
    pub timestamp_ms: u64,
    pub client: ClientId,
    pub signature: ClientSignature,
}

impl Request {
    /// The bytes a client signs: `(o, t, c)` without the signature.
    pub fn signing_payload(operation: &[u8], timestamp_ms: u64, client: ClientId) -> Vec<u8> {
        let mut w = Writer::with_capacity(operation.len() + 24);
        w.bytes(operation).u64(timestamp_ms).put(&client);
        w.finish()
    }

    pub fn payload(&self) -> Vec<u8> {
        Self::signing_payload(&self.operation, self.timestamp_ms, self.client)
    }

    pub fn digest(&self) -> Digest {
        digest(&self.payload())
    }
}

impl Wire for Request {
    fn encode(&self, w: &mut Writer) {
        w.bytes(&self.operation).u64(self.timestamp_ms).put(&self.client).put(&self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Request { operation: r.bytes()?, timestamp_ms: r.u64()?, client: r.get()?, signature: r.get()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Proposal {
    pub request: Digest,
    pub approved: bool,
}

impl Wire for Proposal {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.request).bool(self.approved);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Proposal { request: r.get()?, approved: r.bool()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub height: u64,
    pub parent_hash: Digest,
    pub commit_time_ms: u64,
    pub merkle_root: Digest,
    pub proposals_digest: Digest,
    pub proposer: NodeId,
    pub table_version: u64,
}

impl BlockHeader {
    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

impl Wire for BlockHeader {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height)
            .put(&self.parent_hash)
            .u64(self.commit_time_ms)
            .put(&self.merkle_root)
            .put(&self.proposals_digest)
            .put(&self.proposer)
            .u64(self.table_version);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(BlockHeader {
            height: r.u64()?,
            parent_hash: r.get()?,
            commit_time_ms: r.u64()?,
            merkle_root: r.get()?,
            proposals_digest: r.get()?,
            proposer: r.get()?,
            table_version: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub proposals: Vec<Proposal>,
    /// Bodies of the proposed requests, in proposal order.
    pub requests: Vec<Request>,
}

impl Wire for Block {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.header).seq(&self.proposals).seq(&self.requests);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Block { header: r.get()?, proposals: r.seq()?, requests: r.seq()? })
    }
}

pub fn proposals_digest(proposals: &[Proposal]) -> Digest {
    let mut w = Writer::with_capacity(4 + proposals.len() * 33);
    w.seq(proposals);
    digest(&w.finish())
}

/// Root over the approved proposals, or `Digest::ZERO` if none was approved.
pub fn approved_root(proposals: &[Proposal]) -> Digest {
    let leaves: Vec<Digest> = proposals.iter().filter(|p| p.approved).map(|p| p.request).collect();
    merkle_root(&leaves).unwrap_or(Digest::ZERO)
}

impl Block {
    pub fn genesis() -> Block {
        Block {
            header: BlockHeader {
                height: 0,
                parent_hash: Digest::ZERO,
                commit_time_ms: 0,
                merkle_root: Digest::ZERO,
                proposals_digest: proposals_digest(&[]),
                proposer: NodeId(0),
                table_version: 0,
            },
            proposals: Vec::new(),
            requests: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        height: u64,
        parent_hash: Digest,
        commit_time_ms: u64,
        proposals: Vec<Proposal>,
        requests: Vec<Request>,
        proposer: NodeId,
        table_version: u64,
    ) -> Block {
        let header = BlockHeader {
            height,
            parent_hash,
            commit_time_ms,
            merkle_root: approved_root(&proposals),
            proposals_digest: proposals_digest(&proposals),
            proposer,
            table_version,
        };
        Block { header, proposals, requests }
    }

    pub fn digest(&self) -> Digest {
        self.header.digest()
    }

    pub fn height(&self) -> u64 {
        self.header.height
    }

    pub fn approved(&self) -> impl Iterator<Item = &Digest> {
        self.proposals.iter().filter(|p| p.approved).map(|p| &p.request)
    }

    /// Header commitments match the body and every proposal has its request.
    pub fn body_consistent(&self) -> bool {
        self.header.proposals_digest == proposals_digest(&self.proposals)
            && self.header.merkle_root == approved_root(&self.proposals)
            && self.requests.len() == self.proposals.len()
            && self.requests.iter().zip(&self.proposals).all(|(r, p)| r.digest() == p.request)
    }
}

/// Binary Merkle root. An odd node at any level is paired with itself, so a
/// single leaf `L` yields `H(L ‖ L)`.
pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, LedgerError> {
    if leaves.is_empty() {
        return Err(LedgerError::EmptyLeaves);
    }
    let mut level = leaves.to_vec();
    loop {
        let next: Vec<Digest> = level.chunks(2).map(|c| digest_pair(&c[0], c.get(1).unwrap_or(&c[0]))).collect();
        if next.len() == 1 {
            return Ok(next[0]);
        }
        level = next;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainEntry {
    pub header: BlockHeader,
    pub digest: Digest,
    body: Option<Block>,
    /// Approved requests committed up to and including this height.
    approved_total: u64,
}

impl ChainEntry {
    pub fn body(&self) -> Option<&Block> {
        self.body.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    entries: Vec<ChainEntry>,
    checkpoint_height: u64,
    state_summary: Digest,
    approved: BTreeSet<Digest>,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new()
    }
}

impl Chain {
    pub fn new() -> Chain {
        let g = Block::genesis();
        let entry = ChainEntry { header: g.header.clone(), digest: g.digest(), body: Some(g), approved_total: 0 };
        let mut chain = Chain {
            entries: vec![entry],
            checkpoint_height: 0,
            state_summary: Digest::ZERO,
            approved: BTreeSet::new(),
        };
        chain.state_summary = chain.state_digest_at(0).expect("genesis");
        chain
    }

    pub fn tip(&self) -> &ChainEntry {
        self.entries.last().expect("chain always holds genesis")
    }

    pub fn tip_height(&self) -> u64 {
        self.tip().header.height
    }

    pub fn tip_digest(&self) -> Digest {
        self.tip().digest
    }

    pub fn checkpoint_height(&self) -> u64 {
        self.checkpoint_height
    }

    pub fn state_summary(&self) -> Digest {
        self.state_summary
    }

    pub fn entry(&self, height: u64) -> Option<&ChainEntry> {
        self.entries.get(usize::try_from(height).ok()?)
    }

    pub fn header(&self, height: u64) -> Option<&BlockHeader> {
        self.entry(height).map(|e| &e.header)
    }

    pub fn block(&self, height: u64) -> Result<&Block, LedgerError> {
        let e = self.entry(height).ok_or(LedgerError::UnknownHeight(height))?;
        e.body.as_ref().ok_or(LedgerError::BodyPruned(height))
    }

    pub fn is_approved(&self, request: &Digest) -> bool {
        self.approved.contains(request)
    }

    pub fn approved_count(&self) -> u64 {
        self.tip().approved_total
    }

    fn check_link(&self, header: &BlockHeader, d: Digest) -> Result<(), LedgerError> {
        if let Some(existing) = self.entry(header.height) {
            if existing.digest == d {
                return Err(LedgerError::DuplicateBlock(header.height));
            }
        }
        let expected = self.tip_height() + 1;
        if header.height != expected {
            return Err(LedgerError::HeightGap { expected, got: header.height });
        }
        if header.parent_hash != self.tip_digest() {
            return Err(LedgerError::ParentMismatch { tip: self.tip_height() });
        }
        Ok(())
    }

    pub fn append_block(&mut self, block: Block) -> Result<Digest, LedgerError> {
        let d = block.digest();
        self.check_link(&block.header, d)?;
        if !block.body_consistent() {
            return Err(LedgerError::InvalidBody);
        }
        let mut fresh = BTreeSet::new();
        for a in block.approved() {
            if self.approved.contains(a) || !fresh.insert(*a) {
                return Err(LedgerError::DuplicateRequest(*a));
            }
        }
        let approved_total = self.tip().approved_total + fresh.len() as u64;
        self.approved.extend(fresh);
        self.entries.push(ChainEntry { header: block.header.clone(), digest: d, body: Some(block), approved_total });
        Ok(d)
    }

    /// Appends a header whose body the source had already pruned. The
    /// header is treated as checkpointed history.
    pub fn append_header_only(&mut self, header: BlockHeader, approved_total: u64) -> Result<Digest, LedgerError> {
        let d = header.digest();
        self.check_link(&header, d)?;
        self.entries.push(ChainEntry { header, digest: d, body: None, approved_total });
        self.checkpoint_height = self.tip_height();
        self.state_summary = self.state_digest_at(self.checkpoint_height)?;
        Ok(d)
    }

    pub fn approved_total_at(&self, height: u64) -> Option<u64> {
        self.entry(height).map(|e| e.approved_total)
    }

    /// Summary of the replicated state at `height`: the block digest there
    /// and the number of approved requests committed so far.
    pub fn state_digest_at(&self, height: u64) -> Result<Digest, LedgerError> {
        let e = self.entry(height).ok_or(LedgerError::UnknownHeight(height))?;
        let mut w = Writer::new();
        w.u64(height).put(&e.digest).u64(e.approved_total);
        Ok(digest(&w.finish()))
    }

    /// Next checkpoint `(height, state digest)` once `threshold` blocks have
    /// accumulated since the last one.
    pub fn checkpoint_candidate(&self, threshold: u64) -> Result<(u64, Digest), LedgerError> {
        let have = self.tip_height() - self.checkpoint_height;
        if have < threshold.max(1) {
            return Err(LedgerError::ThresholdNotReached { have, need: threshold.max(1) });
        }
        let h = self.tip_height();
        Ok((h, self.state_digest_at(h)?))
    }

    pub fn take_checkpoint(&mut self, threshold: u64) -> Result<u64, LedgerError> {
        let (h, _) = self.checkpoint_candidate(threshold)?;
        self.prune_below(h)?;
        Ok(h)
    }

    /// Drops bodies below `height` and records the checkpoint. Idempotent;
    /// a lower height than the current checkpoint is a no-op.
    pub fn prune_below(&mut self, height: u64) -> Result<(), LedgerError> {
        if height > self.tip_height() {
            return Err(LedgerError::UnknownHeight(height));
        }
        if height <= self.checkpoint_height {
            return Ok(());
        }
        for e in &mut self.entries[..height as usize] {
            e.body = None;
        }
        self.checkpoint_height = height;
        self.state_summary = self.state_digest_at(height)?;
        Ok(())
    }

    /// Re-walks every hash link from genesis to the tip.
    pub fn verify_links(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[1].header.parent_hash == w[0].digest && w[1].header.height == w[0].header.height + 1)
            && self.entries.iter().all(|e| e.digest == e.header.digest())
            && self.entries.iter().filter_map(|e| e.body.as_ref()).all(|b| b.body_consistent())
    }

    pub fn digests(&self) -> impl Iterator<Item = (u64, Digest)> + '_ {
        self.entries.iter().map(|e| (e.header.height, e.digest))
    }

    /// One JSON object per height: digest, header hex, body hex or null.
    pub fn export_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let body = match &e.body {
                Some(b) => format!("\"{}\"", hex::encode(b.to_bytes())),
                None => "null".to_string(),
            };
            out.push_str(&format!(
                "{{\"height\":{},\"digest\":\"{}\",\"header\":\"{}\",\"body\":{}}}\n",
                e.header.height,
                e.digest,
                hex::encode(e.header.to_bytes()),
                body
            ));
        }
        out
    }
}

/// Pending client requests in arrival order.
#[derive(Debug, Clone, Default)]
pub struct RequestPool {
    seq: u64,
    pending: BTreeMap<u64, (Digest, Request)>,
    index: BTreeMap<Digest, u64>,
    in_flight: BTreeMap<Digest, (u64, Request)>,
    committed: BTreeSet<Digest>,
}

impl RequestPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the digest is already pending, in flight or done.
    pub fn insert(&mut self, request: Request) -> bool {
        let d = request.digest();
        if self.knows(&d) {
            return false;
        }
        self.seq += 1;
        self.pending.insert(self.seq, (d, request));
        self.index.insert(d, self.seq);
        true
    }

    pub fn knows(&self, d: &Digest) -> bool {
        self.index.contains_key(d) || self.in_flight.contains_key(d) || self.committed.contains(d)
    }

    pub fn is_committed(&self, d: &Digest) -> bool {
        self.committed.contains(d)
    }

    pub fn get(&self, d: &Digest) -> Option<&Request> {
        if let Some(s) = self.index.get(d) {
            return self.pending.get(s).map(|(_, r)| r);
        }
        self.in_flight.get(d).map(|(_, r)| r)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn committed_len(&self) -> usize {
        self.committed.len()
    }

    /// Up to `limit` oldest pending requests, now marked in flight.
    pub fn take_batch(&mut self, limit: usize) -> Vec<Request> {
        let mut out = Vec::new();
        while out.len() < limit {
            let Some((s, (d, r))) = self.pending.pop_first() else { break };
            self.index.remove(&d);
            self.in_flight.insert(d, (s, r.clone()));
            out.push(r);
        }
        out
    }

    /// Returns in-flight requests to the pending queue at their original
    /// positions, e.g. after an abandoned round.
    pub fn release_in_flight(&mut self) {
        for (d, (s, r)) in std::mem::take(&mut self.in_flight) {
            self.pending.insert(s, (d, r));
            self.index.insert(d, s);
        }
    }

    /// Marks requests as finished (approved or rejected); they are never
    /// accepted again.
    pub fn finish<'a>(&mut self, digests: impl IntoIterator<Item = &'a Digest>) {
        for d in digests {
            if let Some(s) = self.index.remove(d) {
                self.pending.remove(&s);
            }
            self.in_flight.remove(d);
            self.committed.insert(*d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{KeyRegistry, SignerId};

    fn request(i: u64) -> Request {
        let mut reg = KeyRegistry::new(0);
        let c = SignerId::Client(ClientId(1));
        reg.register(c);
        let op = i.to_be_bytes().to_vec();
        let signature = reg.sign(c, &Request::signing_payload(&op, i, ClientId(1))).unwrap();
        Request { operation: op, timestamp_ms: i, client: ClientId(1), signature }
    }

    fn block_on(chain: &Chain, reqs: Vec<Request>) -> Block {
        let props = reqs.iter().map(|r| Proposal { request: r.digest(), approved: true }).collect();
        Block::new(chain.tip_height() + 1, chain.tip_digest(), 10, props, reqs, NodeId(1), 0)
    }

    #[test]
    fn merkle_small_cases() {
        let a = digest(b"a");
        let b = digest(b"b");
        assert_eq!(merkle_root(&[a]).unwrap(), digest_pair(&a, &a));
        assert_eq!(merkle_root(&[a, b]).unwrap(), digest_pair(&a, &b));
        assert_eq!(merkle_root(&[]), Err(LedgerError::EmptyLeaves));
    }

    #[test]
    fn rejected_proposals_excluded_from_root() {
        let (r1, r2) = (request(1), request(2));
        let props =
            vec![Proposal { request: r1.digest(), approved: true }, Proposal { request: r2.digest(), approved: false }];
        let b = Block::new(1, Digest::ZERO, 0, props, vec![r1.clone(), r2], NodeId(1), 0);
        assert_eq!(b.header.merkle_root, merkle_root(&[r1.digest()]).unwrap());
        let none = vec![Proposal { request: r1.digest(), approved: false }];
        assert_eq!(approved_root(&none), Digest::ZERO);
    }

    #[test]
    fn request_digest_ignores_signature() {
        let mut r = request(3);
        let d = r.digest();
        r.signature.bytes[0] ^= 1;
        assert_eq!(r.digest(), d);
        assert_eq!(Request::from_bytes(&r.to_bytes()).unwrap(), r);
    }

    #[test]
    fn genesis_shape() {
        let c = Chain::new();
        assert_eq!(c.tip_height(), 0);
        assert_eq!(c.tip().header.parent_hash, Digest::ZERO);
        assert!(c.block(0).unwrap().proposals.is_empty());
    }

    #[test]
    fn append_rules() {
        let mut c = Chain::new();
        let b1 = block_on(&c, vec![request(1)]);
        c.append_block(b1.clone()).unwrap();
        assert_eq!(c.append_block(b1.clone()), Err(LedgerError::DuplicateBlock(1)));
        let mut wrong = block_on(&c, vec![request(2)]);
        wrong.header.parent_hash = Digest::ZERO;
        assert_eq!(c.append_block(wrong), Err(LedgerError::ParentMismatch { tip: 1 }));
        let mut gap = block_on(&c, vec![request(2)]);
        gap.header.height = 5;
        assert_eq!(c.append_block(gap), Err(LedgerError::HeightGap { expected: 2, got: 5 }));
        let again = block_on(&c, vec![request(1)]);
        assert_eq!(c.append_block(again), Err(LedgerError::DuplicateRequest(request(1).digest())));
        let mut tampered = block_on(&c, vec![request(2)]);
        tampered.requests[0] = request(9);
        assert_eq!(c.append_block(tampered), Err(LedgerError::InvalidBody));
    }

    #[test]
    fn checkpoint_prunes_bodies() {
        let mut c = Chain::new();
        for i in 1..=10 {
            let b = block_on(&c, vec![request(i)]);
            c.append_block(b).unwrap();
        }
        assert!(matches!(c.take_checkpoint(11), Err(LedgerError::ThresholdNotReached { have: 10, need: 11 })));
        assert_eq!(c.take_checkpoint(10).unwrap(), 10);
        for h in 0..10 {
            assert_eq!(c.block(h), Err(LedgerError::BodyPruned(h)));
            assert!(c.header(h).is_some());
        }
        assert!(c.block(10).is_ok());
        let b = block_on(&c, vec![request(11)]);
        c.append_block(b).unwrap();
        assert!(c.verify_links());
        c.prune_below(10).unwrap();
        assert_eq!(c.checkpoint_height(), 10);
        assert_eq!(c.export_ndjson().lines().count(), 12);
    }

    #[test]
    fn pool_fifo_and_dedup() {
        let mut p = RequestPool::new();
        assert!(p.take_batch(10).is_empty());
        assert!(p.insert(request(0)));
        assert!(!p.insert(request(0)));
        assert_eq!(p.len(), 1);
        for i in 1..25 {
            p.insert(request(i));
        }
        let sizes: Vec<usize> = (0..3).map(|_| p.take_batch(10).len()).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        assert!(!p.insert(request(3)));
        p.release_in_flight();
        let first = p.take_batch(1);
        assert_eq!(first[0], request(0));
        p.finish([&request(0).digest()]);
        p.release_in_flight();
        assert_eq!(p.len(), 24);
        assert!(!p.insert(request(0)));
    }
}
