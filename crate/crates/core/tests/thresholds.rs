//! Each quorum rule is driven through real nodes with a filter on which
//! votes reach the node under test. One vote fewer than the threshold must
//! leave the outcome unchanged; the threshold itself must flip it.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use qdbft_core::auth::{adjudicate_dispute, DisputeOutcome, KeyRegistry, SignerId};
use qdbft_core::consensus::messages::Body;
use qdbft_core::consensus::quorum::{
    agreement_quorum, client_quorum, dispute_peers, exit_peers, fault_bound, join_peers,
};
use qdbft_core::consensus::{
    Client, ClientConfig, Command, Envelope, Input, MessageKind, Node, NodeConfig, Output, Reply, Status, TimerKind,
};
use qdbft_core::ring::{setup_table, Placement};
use qdbft_core::{ClientId, NodeId};

const HOP_US: u64 = 1_000;

enum Ev {
    Msg { from: NodeId, to: NodeId, env: Arc<Envelope> },
    Timer { node: NodeId, kind: TimerKind, gen: u64 },
}

type Filter = Box<dyn Fn(NodeId, NodeId, &Envelope) -> bool>;

/// A minimal router: fixed one-hop delay, per-node timers and a delivery
/// filter. Nodes listed in `dead` neither receive nor send.
struct Lab {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Ev>,
    nodes: BTreeMap<NodeId, Node>,
    gens: BTreeMap<(NodeId, TimerKind), u64>,
    dead: Vec<NodeId>,
    allow: Filter,
    sent: Vec<(NodeId, Arc<Envelope>)>,
    registry: KeyRegistry,
}

impl Lab {
    fn new(n: u64, extra: &[u64]) -> Lab {
        let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        let mut registry = KeyRegistry::new(7);
        let everyone: Vec<NodeId> = ids.iter().copied().chain(extra.iter().map(|e| NodeId(*e))).collect();
        for id in &everyone {
            registry.register(SignerId::Node(*id));
        }
        registry.register(SignerId::Client(ClientId(1)));
        let table = setup_table(&ids, 8, Placement::Equidistant).unwrap();
        let mut nodes = BTreeMap::new();
        for id in everyone {
            nodes.insert(id, Node::new(id, table.clone(), registry.clone(), NodeConfig::default()).unwrap());
        }
        Lab {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            nodes,
            gens: BTreeMap::new(),
            dead: Vec::new(),
            allow: Box::new(|_, _, _| true),
            sent: Vec::new(),
            registry,
        }
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.pending.insert(self.seq, ev);
    }

    fn feed(&mut self, id: NodeId, input: Input) {
        if self.dead.contains(&id) {
            return;
        }
        let fx = self.nodes.get_mut(&id).unwrap().handle(self.now, input);
        for out in fx.outputs {
            match out {
                Output::Send { to, env } => {
                    self.sent.push((id, env.clone()));
                    self.push(self.now + HOP_US, Ev::Msg { from: id, to, env });
                }
                Output::SetTimer { kind, after_us } => {
                    let g = self.gens.entry((id, kind)).or_insert(0);
                    *g += 1;
                    let gen = *g;
                    self.push(self.now + after_us, Ev::Timer { node: id, kind, gen });
                }
                Output::CancelTimer(kind) => *self.gens.entry((id, kind)).or_insert(0) += 1,
                Output::Reply { .. } | Output::Log(_) => {}
            }
        }
    }

    fn start(&mut self) {
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for id in ids {
            if self.nodes[&id].status() == Status::Member {
                self.feed(id, Input::Start);
            }
        }
    }

    fn submit(&mut self, to: NodeId) {
        let client =
            Client::new(ClientConfig { id: ClientId(1), timeout_ms: 5000, seed: 1 }, self.registry.clone(), vec![]);
        let req = client.sign(b"op".to_vec(), self.now / 1000).unwrap();
        self.feed(to, Input::ClientRequest(req));
    }

    fn run_until(&mut self, t_us: u64) {
        while let Some(Reverse((at, seq))) = self.queue.peek().copied() {
            if at > t_us {
                break;
            }
            self.queue.pop();
            self.now = at;
            match self.pending.remove(&seq).unwrap() {
                Ev::Msg { from, to, env } => {
                    if !self.dead.contains(&from) && (self.allow)(from, to, &env) {
                        self.feed(to, Input::Message(env));
                    }
                }
                Ev::Timer { node, kind, gen } => {
                    if self.gens.get(&(node, kind)) == Some(&gen) {
                        self.feed(node, Input::Timer(kind));
                    }
                }
            }
        }
        self.now = t_us;
    }

    fn sent_kind(&self, from: NodeId, kind: MessageKind) -> bool {
        self.sent.iter().any(|(s, e)| *s == from && e.kind() == kind)
    }
}

/// Votes of `kind` reach `target` only from the first `k` other senders.
fn limit(target: NodeId, kind: MessageKind, allowed: Vec<NodeId>) -> Filter {
    Box::new(move |from, to, env| to != target || env.kind() != kind || allowed.contains(&from))
}

fn peers_except(n: u64, skip: &[NodeId]) -> Vec<NodeId> {
    (1..=n).map(NodeId).filter(|i| !skip.contains(i)).collect()
}

#[test]
fn thresholds_are_pinned() {
    for f in 1..=3usize {
        let n = 3 * f + 1;
        assert_eq!(fault_bound(n), f);
        assert_eq!(agreement_quorum(n), 2 * f + 1);
        assert_eq!(join_peers(f), 2 * f);
        assert_eq!(exit_peers(f), 2 * f - 1);
        assert_eq!(client_quorum(f), f + 1);
        assert_eq!(dispute_peers(n, f), n - f - 1);
    }
}

/// Primary of round 1 and some other member to observe.
fn roles(lab: &Lab) -> (NodeId, NodeId) {
    let primary = lab.nodes[&NodeId(1)].primary();
    let target = lab.nodes.keys().copied().find(|i| *i != primary).unwrap();
    (primary, target)
}

fn transmit_outcome(n: u64, peer_votes: usize) -> bool {
    let mut lab = Lab::new(n, &[]);
    let (primary, target) = roles(&lab);
    let allowed: Vec<NodeId> = peers_except(n, &[target]).into_iter().take(peer_votes).collect();
    // Other members' COMMITs are held back too, so the node cannot adopt a
    // certificate formed without it.
    lab.allow = Box::new(move |from, to, env| {
        to != target
            || match env.kind() {
                MessageKind::Transmit => allowed.contains(&from),
                MessageKind::Commit => false,
                _ => true,
            }
    });
    lab.start();
    lab.submit(primary);
    lab.run_until(1_000_000);
    lab.sent_kind(target, MessageKind::Commit)
}

#[test]
fn transmit_quorum_flips_at_2f_plus_1() {
    for n in [4u64, 7, 10] {
        let q = 2 * fault_bound(n as usize) + 1;
        // The node's own TRANSMIT is the remaining vote.
        assert!(transmit_outcome(n, q - 1), "n={n}");
        assert!(!transmit_outcome(n, q - 2), "n={n}");
    }
}

fn commit_outcome(n: u64, peer_votes: usize) -> bool {
    let mut lab = Lab::new(n, &[]);
    let (primary, target) = roles(&lab);
    let allowed: Vec<NodeId> = peers_except(n, &[target]).into_iter().take(peer_votes).collect();
    lab.allow = limit(target, MessageKind::Commit, allowed);
    lab.start();
    lab.submit(primary);
    lab.run_until(1_000_000);
    lab.nodes[&target].chain().tip_height() >= 1
}

#[test]
fn commit_quorum_flips_at_2f_plus_1() {
    for n in [4u64, 7, 10] {
        let q = 2 * fault_bound(n as usize) + 1;
        assert!(commit_outcome(n, q - 1), "n={n}");
        assert!(!commit_outcome(n, q - 2), "n={n}");
    }
}

fn join_outcome(n: u64, peer_votes: usize) -> bool {
    let joiner = n + 1;
    let mut lab = Lab::new(n, &[joiner]);
    let target = NodeId(1);
    let allowed: Vec<NodeId> = peers_except(n, &[target]).into_iter().take(peer_votes).collect();
    lab.allow = limit(target, MessageKind::Agr, allowed);
    lab.start();
    let table = lab.nodes[&target].table().clone();
    lab.feed(NodeId(joiner), Input::Command(Command::Join { table }));
    lab.run_until(1_000_000);
    lab.sent_kind(target, MessageKind::AgrC)
}

#[test]
fn join_agreement_flips_at_2f() {
    for n in [4u64, 7, 10] {
        let need = join_peers(fault_bound(n as usize));
        assert!(join_outcome(n, need), "n={n}");
        assert!(!join_outcome(n, need - 1), "n={n}");
    }
}

fn exit_outcome(n: u64, echoes: usize) -> bool {
    let leaver = NodeId(n);
    let target = NodeId(1);
    let mut lab = Lab::new(n, &[]);
    // The leaver's own EXIT counts as one peer vote; the rest are echoes.
    let allowed: Vec<NodeId> = peers_except(n, &[target, leaver]).into_iter().take(echoes).collect();
    lab.allow = limit(target, MessageKind::ExitBroad, allowed);
    lab.start();
    lab.feed(leaver, Input::Command(Command::Exit));
    lab.run_until(1_000_000);
    lab.sent_kind(target, MessageKind::Lc)
}

#[test]
fn exit_agreement_flips_at_2f_minus_1() {
    for n in [4u64, 7, 10] {
        let need = exit_peers(fault_bound(n as usize));
        assert!(exit_outcome(n, need - 1), "n={n}");
        if need >= 2 {
            assert!(!exit_outcome(n, need - 2), "n={n}");
        }
    }
}

fn unresponsive_outcome(n: u64, votes: usize) -> bool {
    let silent = NodeId(n);
    let target = NodeId(1);
    let mut lab = Lab::new(n, &[]);
    lab.dead = vec![silent];
    let allowed: Vec<NodeId> = peers_except(n, &[target, silent]).into_iter().take(votes).collect();
    lab.allow = Box::new(move |from, to, env| {
        if to != target {
            return true;
        }
        match &env.body {
            Body::Unresp(m) => m.subject == silent && allowed.contains(&from),
            Body::PrimaryMissing(_) => false,
            _ => from != silent && !matches!(env.body, Body::Sur(_) | Body::SurAck(_)) && env.table_version == 0,
        }
    });
    lab.start();
    lab.run_until(15_000_000);
    !lab.nodes[&target].table().contains(silent)
}

#[test]
fn unresponsive_removal_flips_at_2f_minus_1() {
    for n in [4u64, 7, 10] {
        let need = exit_peers(fault_bound(n as usize));
        assert!(unresponsive_outcome(n, need), "n={n}");
        assert!(!unresponsive_outcome(n, need - 1), "n={n}");
    }
}

fn client_outcome(n: u64, replies: usize) -> bool {
    let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
    let mut registry = KeyRegistry::new(3);
    for id in &ids {
        registry.register(SignerId::Node(*id));
    }
    registry.register(SignerId::Client(ClientId(1)));
    let mut client =
        Client::new(ClientConfig { id: ClientId(1), timeout_ms: 1000, seed: 5 }, registry.clone(), ids.clone());
    let (req, _) = client.submit(0, b"x".to_vec()).unwrap();
    let block = qdbft_core::digest(b"block");
    let entries = vec![(req.digest(), true)];
    let mut accepted = false;
    for id in ids.iter().take(replies) {
        let payload = Reply::signing_payload(*id, ClientId(1), 1, &block, &entries);
        let signature = registry.sign(SignerId::Node(*id), &payload).unwrap();
        let reply = Reply {
            node: *id,
            client: ClientId(1),
            height: 1,
            block_digest: block,
            entries: entries.clone(),
            signature,
        };
        accepted |= !client.on_reply(10, &reply).is_empty();
    }
    accepted
}

#[test]
fn client_acceptance_flips_at_f_plus_1() {
    for n in [4u64, 7, 10] {
        let need = client_quorum(fault_bound(n as usize));
        assert!(client_outcome(n, need), "n={n}");
        assert!(!client_outcome(n, need - 1), "n={n}");
    }
}

#[test]
fn dispute_conviction_flips_at_n_minus_f_minus_1() {
    for n in [4usize, 7, 10] {
        let f = fault_bound(n);
        let need = n - f - 1;
        assert_eq!(adjudicate_dispute(need, n, f).unwrap(), DisputeOutcome::RepudiationConfirmed);
        assert_eq!(adjudicate_dispute(need - 1, n, f).unwrap(), DisputeOutcome::Insufficient);
    }
}
