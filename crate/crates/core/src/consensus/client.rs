//! Client actor: signs requests, submits them to one node, resubmits on
//! timeout and accepts a result once `f + 1` nodes reply consistently.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::messages::Reply;
use super::quorum::{client_quorum, fault_bound};
use crate::auth::{AuthError, ClientId, Digest, KeyRegistry, SignerId, Verdict};
use crate::ledger::Request;
use crate::ring::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub id: ClientId,
    /// Resubmission deadline after each (re)submission.
    pub timeout_ms: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ClientEvent {
    Submitted { request: Digest, to: NodeId },
    Resubmitted { request: Digest, to: Vec<NodeId> },
    Accepted { request: Digest, height: u64, approved: bool, latency_us: u64 },
    BadReply { node: NodeId },
}

#[derive(Debug, Clone)]
struct Pending {
    request: Request,
    submitted_us: u64,
    deadline_us: u64,
    tried: BTreeSet<NodeId>,
    /// (height, block, decision) -> replying nodes
    votes: BTreeMap<(u64, Digest, bool), BTreeSet<NodeId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Accepted {
    pub height: u64,
    pub approved: bool,
    pub submitted_us: u64,
    pub latency_us: u64,
}

#[derive(Debug, Clone)]
pub struct Client {
    cfg: ClientConfig,
    registry: KeyRegistry,
    nodes: Vec<NodeId>,
    rng: ChaCha8Rng,
    seq: u64,
    pending: BTreeMap<Digest, Pending>,
    accepted: BTreeMap<Digest, Accepted>,
}

impl Client {
    pub fn new(cfg: ClientConfig, registry: KeyRegistry, nodes: Vec<NodeId>) -> Client {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Client { cfg, registry, nodes, rng, seq: 0, pending: BTreeMap::new(), accepted: BTreeMap::new() }
    }

    pub fn id(&self) -> ClientId {
        self.cfg.id
    }

    /// Updates the membership the client submits to and sizes `f` from.
    pub fn set_nodes(&mut self, nodes: Vec<NodeId>) {
        self.nodes = nodes;
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn f(&self) -> usize {
        fault_bound(self.nodes.len())
    }

    pub fn sign(&self, operation: Vec<u8>, timestamp_ms: u64) -> Result<Request, AuthError> {
        let payload = Request::signing_payload(&operation, timestamp_ms, self.cfg.id);
        let signature = self.registry.sign(SignerId::Client(self.cfg.id), &payload)?;
        Ok(Request { operation, timestamp_ms, client: self.cfg.id, signature })
    }

    /// Signs a fresh operation and picks a random node for it.
    pub fn submit(&mut self, now_us: u64, operation: Vec<u8>) -> Result<(Request, NodeId), AuthError> {
        self.seq += 1;
        let mut op = operation;
        op.extend_from_slice(&self.seq.to_be_bytes());
        let request = self.sign(op, now_us / 1000)?;
        let to = *self.nodes.choose(&mut self.rng).ok_or(AuthError::InvalidFaultBound { n: 0, f: 0 })?;
        let d = request.digest();
        self.pending.insert(
            d,
            Pending {
                request: request.clone(),
                submitted_us: now_us,
                deadline_us: now_us + self.cfg.timeout_ms * 1000,
                tried: BTreeSet::from([to]),
                votes: BTreeMap::new(),
            },
        );
        Ok((request, to))
    }

    /// Handles one reply; returns the requests it completed.
    pub fn on_reply(&mut self, now_us: u64, reply: &Reply) -> Vec<ClientEvent> {
        let ok = matches!(
            self.registry.verify(SignerId::Node(reply.node), &reply.payload(), &reply.signature),
            Ok(Verdict::Accept)
        );
        if !ok || reply.client != self.cfg.id {
            return vec![ClientEvent::BadReply { node: reply.node }];
        }
        let need = client_quorum(self.f());
        let mut out = Vec::new();
        for (d, approved) in &reply.entries {
            let Some(p) = self.pending.get_mut(d) else { continue };
            let voters = p.votes.entry((reply.height, reply.block_digest, *approved)).or_default();
            voters.insert(reply.node);
            if voters.len() >= need {
                let p = self.pending.remove(d).expect("present");
                let latency_us = now_us - p.submitted_us;
                self.accepted.insert(
                    *d,
                    Accepted { height: reply.height, approved: *approved, submitted_us: p.submitted_us, latency_us },
                );
                out.push(ClientEvent::Accepted { request: *d, height: reply.height, approved: *approved, latency_us });
            }
        }
        out
    }

    /// Resubmits every overdue request to `f + 1` nodes it has not tried,
    /// or to random nodes once all have been tried.
    pub fn on_tick(&mut self, now_us: u64) -> Vec<(NodeId, Request, ClientEvent)> {
        let k = client_quorum(self.f());
        let timeout = self.cfg.timeout_ms * 1000;
        let mut out = Vec::new();
        for (d, p) in self.pending.iter_mut() {
            if now_us < p.deadline_us {
                continue;
            }
            let mut fresh: Vec<NodeId> = self.nodes.iter().copied().filter(|n| !p.tried.contains(n)).collect();
            if fresh.len() < k {
                fresh = self.nodes.clone();
            }
            fresh.shuffle(&mut self.rng);
            fresh.truncate(k);
            p.tried.extend(fresh.iter().copied());
            p.deadline_us = now_us + timeout;
            for to in &fresh {
                out.push((*to, p.request.clone(), ClientEvent::Resubmitted { request: *d, to: fresh.clone() }));
            }
        }
        out
    }

    pub fn next_deadline(&self) -> Option<u64> {
        self.pending.values().map(|p| p.deadline_us).min()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn accepted(&self) -> &BTreeMap<Digest, Accepted> {
        &self.accepted
    }

    pub fn pending(&self) -> impl Iterator<Item = (&Digest, u64)> {
        self.pending.iter().map(|(d, p)| (d, p.submitted_us))
    }
}
