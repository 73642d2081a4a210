//! One replica as a deterministic event handler.
//!
//! A [`Node`] consumes an [`Input`] together with the current virtual time
//! and returns [`Effects`]: messages to send, replies for clients, timer
//! operations and log events. It never reads a clock and never blocks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::messages::{
    batch_digest, new_digest, signed_bytes, transmit_content, AgrMsg, Auth, Body, CheckpointMsg, CommitMsg, DisputeMsg,
    DisputeVerdict, Envelope, ExitMsg, JoinMsg, NewMsg, PrimaryMissingMsg, ProbeMsg, Reply, SubjectMsg, SyncRequestMsg,
    SyncResponseMsg, TransmitMsg, WelcomeMsg,
};
use super::quorum::{agreement_quorum, exit_peers, join_peers, vouch_quorum, Tally};
use crate::auth::{
    adjudicate_dispute, digest, make_bundle, verify_bundle, ClientId, Digest, DisputeOutcome, KeyRegistry, SignerId,
    TagIssuer, TagMode, Verdict,
};
use crate::ledger::{Block, BlockHeader, Chain, Proposal, Request, RequestPool, DEFAULT_BATCH_LIMIT};
use crate::qkd::{KeyPool, Phase, QkdError, DEFAULT_UNIT_BITS};
use crate::ring::{
    apply_membership_change, map_to_ring, select_primary, ConfigTable, MembershipChange, NodeId, RingError,
};
use crate::wire::Writer;

/// Versions further ahead than this are not buffered.
const MAX_VERSION_LEAD: u64 = 64;
/// Heights served per sync response.
const SYNC_CHUNK: u64 = 64;
/// Upper bound on buffered envelopes across all peers.
const BUFFER_TOTAL: usize = 8192;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Key(#[from] QkdError),
    #[error(transparent)]
    Ring(#[from] RingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeConfig {
    /// Primary timeout and probe deadline.
    pub delta_t_ms: u64,
    pub batch_ms: u64,
    /// `G`, the most requests per block.
    pub batch_limit: usize,
    pub checkpoint_threshold: u64,
    /// When off the smallest member id is always primary.
    pub rotation: bool,
    pub tag_mode: TagMode,
    pub refresh_interval: u32,
    pub key_seed: u64,
    pub units_per_pair: u64,
    pub unit_bits: u32,
    pub auto_refill: Option<u64>,
    pub liveness_tick_ms: u64,
    pub probing: bool,
    pub sync_delay_ms: u64,
    pub buffer_per_peer: usize,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            delta_t_ms: 5_000,
            batch_ms: 100,
            batch_limit: DEFAULT_BATCH_LIMIT,
            checkpoint_threshold: 100,
            rotation: true,
            tag_mode: TagMode::ToeplitzIts,
            refresh_interval: crate::auth::DEFAULT_REFRESH_INTERVAL,
            key_seed: 0,
            units_per_pair: 1 << 16,
            unit_bits: DEFAULT_UNIT_BITS,
            auto_refill: Some(1 << 16),
            liveness_tick_ms: 1_000,
            probing: true,
            sync_delay_ms: 500,
            buffer_per_peer: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Never proposes when selected.
    SilentPrimary,
    /// Sends two different NEW messages to disjoint halves of the members.
    Equivocate,
    /// Corrupts every tag it emits.
    BadTags,
    /// Denies having authenticated one of its own broadcasts.
    Repudiate,
    /// Stamps its bundle messages with the previous table version.
    StaleTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Member,
    /// Holds a table that does not include it.
    Outside,
    Joining,
    Departed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    Idle,
    AwaitNew,
    Transmitting,
    Committing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    Round,
    Batch,
    Liveness,
    Sync,
    JoinRetry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Exit,
    Join { table: ConfigTable },
    SetBehavior(Behavior),
}

#[derive(Debug, Clone)]
pub enum Input {
    Start,
    /// Restart after a crash with durable state intact.
    Recover,
    Message(Arc<Envelope>),
    ClientRequest(Request),
    Timer(TimerKind),
    Command(Command),
}

#[derive(Debug, Clone)]
pub enum Output {
    Send { to: NodeId, env: Arc<Envelope> },
    Reply { client: ClientId, reply: Arc<Reply> },
    SetTimer { kind: TimerKind, after_us: u64 },
    CancelTimer(TimerKind),
    Log(LogEvent),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub tag_gen: u64,
    pub tag_verify: u64,
    pub sig_sign: u64,
    pub sig_verify: u64,
}

impl OpCounts {
    pub fn add(&mut self, other: &OpCounts) {
        self.tag_gen += other.tag_gen;
        self.tag_verify += other.tag_verify;
        self.sig_sign += other.sig_sign;
        self.sig_verify += other.sig_verify;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Effects {
    pub outputs: Vec<Output>,
    pub ops: OpCounts,
}

impl Effects {
    pub fn logs(&self) -> impl Iterator<Item = &LogEvent> {
        self.outputs.iter().filter_map(|o| match o {
            Output::Log(e) => Some(e),
            _ => None,
        })
    }

    pub fn sends(&self) -> impl Iterator<Item = (NodeId, &Arc<Envelope>)> {
        self.outputs.iter().filter_map(|o| match o {
            Output::Send { to, env } => Some((*to, env)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Propose,
    Transmit,
    CommitVote,
    LockAdopted,
    Commit,
    Refinalize,
    Equivocation,
    Drop,
    PrimaryMissing,
    Probe,
    Unresponsive,
    AccusationCancelled,
    TableChanged,
    Departed,
    JoinRequested,
    Joined,
    ExitRequested,
    Checkpoint,
    Pruned,
    CheckpointFlagged,
    CheckpointMismatch,
    SyncRequested,
    SyncApplied,
    DisputeRaised,
    DisputeAttested,
    RepudiationConfirmed,
    Recovered,
    BehaviorChanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    AuthFail,
    NotMember,
    StaleTable,
    TableMismatch,
    WrongProposer,
    BadParent,
    BadBatch,
    BadSignature,
    DuplicateRequest,
    StaleJoinerTable,
    BufferFull,
    KeyFailure,
    InvalidBlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub digest: Option<Digest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<DropCause>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSnapshot {
    pub id: NodeId,
    pub status: Status,
    pub behavior: Behavior,
    pub table_version: u64,
    pub table_digest: Digest,
    pub members: Vec<NodeId>,
    pub tip_height: u64,
    pub tip_digest: Digest,
    pub checkpoint_height: u64,
    pub round_height: u64,
    pub primary: NodeId,
    pub phase: RoundPhase,
    pub pending_requests: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Evidence {
    /// Own round timer expired at this height with that node as primary.
    Timeout(u64),
    /// A survival probe went unanswered.
    Probe,
    /// Convicted of repudiation.
    Dispute,
}

#[derive(Debug, Clone)]
enum SyncItem {
    Block(Block),
    Header(BlockHeader, u64),
}

impl SyncItem {
    fn parent(&self) -> Digest {
        match self {
            SyncItem::Block(b) => b.header.parent_hash,
            SyncItem::Header(h, _) => h.parent_hash,
        }
    }
}

/// State of the current height under the current table version.
#[derive(Debug, Clone)]
struct Round {
    height: u64,
    version: u64,
    primary: NodeId,
    proposed: bool,
    batch_fired: bool,
    new_digest: Option<Digest>,
    commit_vote: Option<Digest>,
    transmit_votes: Tally<Digest>,
    commit_votes: Tally<Digest>,
    timeouts: u32,
}

impl Round {
    fn new(height: u64, version: u64, primary: NodeId) -> Round {
        Round {
            height,
            version,
            primary,
            proposed: false,
            batch_fired: false,
            new_digest: None,
            commit_vote: None,
            transmit_votes: Tally::new(),
            commit_votes: Tally::new(),
            timeouts: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    id: NodeId,
    cfg: NodeConfig,
    status: Status,
    behavior: Behavior,
    now_us: u64,
    table: ConfigTable,
    table_digest: Digest,
    chain: Chain,
    pool: RequestPool,
    keys: KeyPool,
    issuer: TagIssuer,
    registry: KeyRegistry,
    /// Request digest to the signature bytes that verified for it.
    verified: BTreeMap<Digest, Vec<u8>>,

    round: Round,
    /// Block this node sent COMMIT for at the current height. Survives
    /// table changes until the height commits.
    lock: Option<Digest>,
    news: BTreeMap<Digest, (u64, NewMsg)>,
    candidates: BTreeMap<Digest, Block>,
    certified: BTreeSet<Digest>,

    buffers: BTreeMap<NodeId, VecDeque<Arc<Envelope>>>,
    buffered: usize,
    ahead: BTreeSet<NodeId>,
    need_replay: bool,

    round_timer: bool,
    batch_timer: bool,
    sync_timer: bool,

    last_heard: BTreeMap<NodeId, u64>,
    probes: BTreeMap<NodeId, u64>,
    nonce: u64,
    evidence: BTreeMap<NodeId, Evidence>,
    /// subject -> voter -> height for PRIMARY_MISSING votes, `None` for UNRESP.
    removal: BTreeMap<NodeId, BTreeMap<NodeId, Option<u64>>>,

    exit_seen: BTreeSet<NodeId>,
    exit_echo: Tally<NodeId>,
    exit_broad_sent: BTreeSet<NodeId>,
    lc_votes: Tally<NodeId>,
    lc_sent: BTreeSet<NodeId>,

    agr: Tally<(NodeId, Digest)>,
    agr_sent: BTreeSet<(NodeId, Digest)>,
    agr_c: Tally<(NodeId, Digest)>,
    agr_c_sent: BTreeSet<(NodeId, Digest)>,
    welcomed: BTreeSet<NodeId>,
    welcome_votes: Tally<Digest>,
    welcome_tables: BTreeMap<Digest, ConfigTable>,

    repudiated: bool,
    attested: BTreeSet<(NodeId, Digest)>,
    attests: Tally<(NodeId, Digest)>,

    checkpoint_sent: u64,
    checkpoint_votes: Tally<(u64, Digest)>,

    sync_items: BTreeMap<(u64, Digest), SyncItem>,
    sync_vouch: Tally<(u64, Digest)>,
    sync_tables: BTreeMap<Digest, ConfigTable>,
    table_votes: Tally<Digest>,
    last_sync_us: Option<u64>,

    fx: Effects,
}

fn join_key(joiner: NodeId, known_version: u64) -> Digest {
    let mut w = Writer::new();
    w.put(&joiner).u64(known_version);
    digest(&w.finish())
}

fn build_block(version: u64, m: &NewMsg, decisions: &[bool]) -> Block {
    let proposals =
        m.requests.iter().zip(decisions).map(|(r, d)| Proposal { request: r.digest(), approved: *d }).collect();
    Block::new(m.height, m.parent_hash, m.commit_time_ms, proposals, m.requests.clone(), m.proposer, version)
}

impl Node {
    pub fn new(id: NodeId, table: ConfigTable, registry: KeyRegistry, cfg: NodeConfig) -> Result<Node, NodeError> {
        let mut members = table.members();
        if !members.contains(&id) {
            members.push(id);
        }
        let mut keys = KeyPool::provision_local(id, &members, cfg.units_per_pair, cfg.unit_bits, cfg.key_seed)?
            .with_auto_refill(cfg.auto_refill);
        keys.begin_round(1);
        let status = if table.contains(id) { Status::Member } else { Status::Outside };
        let chain = Chain::new();
        let primary = Self::pick_primary(&cfg, &table, &chain.tip_digest());
        Ok(Node {
            id,
            status,
            behavior: Behavior::Honest,
            now_us: 0,
            table_digest: table.digest(),
            round: Round::new(1, table.version(), primary),
            table,
            chain,
            pool: RequestPool::new(),
            keys,
            issuer: TagIssuer::with_refresh_interval(cfg.tag_mode, cfg.refresh_interval),
            registry,
            verified: BTreeMap::new(),
            lock: None,
            news: BTreeMap::new(),
            candidates: BTreeMap::new(),
            certified: BTreeSet::new(),
            buffers: BTreeMap::new(),
            buffered: 0,
            ahead: BTreeSet::new(),
            need_replay: false,
            round_timer: false,
            batch_timer: false,
            sync_timer: false,
            last_heard: BTreeMap::new(),
            probes: BTreeMap::new(),
            nonce: 0,
            evidence: BTreeMap::new(),
            removal: BTreeMap::new(),
            exit_seen: BTreeSet::new(),
            exit_echo: Tally::new(),
            exit_broad_sent: BTreeSet::new(),
            lc_votes: Tally::new(),
            lc_sent: BTreeSet::new(),
            agr: Tally::new(),
            agr_sent: BTreeSet::new(),
            agr_c: Tally::new(),
            agr_c_sent: BTreeSet::new(),
            welcomed: BTreeSet::new(),
            welcome_votes: Tally::new(),
            welcome_tables: BTreeMap::new(),
            repudiated: false,
            attested: BTreeSet::new(),
            attests: Tally::new(),
            checkpoint_sent: 0,
            checkpoint_votes: Tally::new(),
            sync_items: BTreeMap::new(),
            sync_vouch: Tally::new(),
            sync_tables: BTreeMap::new(),
            table_votes: Tally::new(),
            last_sync_us: None,
            fx: Effects::default(),
            cfg,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn table(&self) -> &ConfigTable {
        &self.table
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn pool(&self) -> &RequestPool {
        &self.pool
    }

    pub fn keys(&self) -> &KeyPool {
        &self.keys
    }

    pub fn round_height(&self) -> u64 {
        self.round.height
    }

    pub fn primary(&self) -> NodeId {
        self.round.primary
    }

    pub fn is_locked(&self) -> bool {
        self.lock.is_some()
    }

    pub fn phase(&self) -> RoundPhase {
        if self.round.commit_vote.is_some() {
            RoundPhase::Committing
        } else if self.round.new_digest.is_some() {
            RoundPhase::Transmitting
        } else if self.has_pending() {
            RoundPhase::AwaitNew
        } else {
            RoundPhase::Idle
        }
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            id: self.id,
            status: self.status,
            behavior: self.behavior,
            table_version: self.table.version(),
            table_digest: self.table_digest,
            members: self.table.members(),
            tip_height: self.chain.tip_height(),
            tip_digest: self.chain.tip_digest(),
            checkpoint_height: self.chain.checkpoint_height(),
            round_height: self.round.height,
            primary: self.round.primary,
            phase: self.phase(),
            pending_requests: self.pool.len(),
        }
    }

    pub fn handle(&mut self, now_us: u64, input: Input) -> Effects {
        self.now_us = now_us;
        match input {
            Input::Start => self.on_start(),
            Input::Recover => self.on_recover(),
            Input::Message(env) => self.on_message(env),
            Input::ClientRequest(r) => self.on_client_request(r),
            Input::Timer(kind) => self.on_timer(kind),
            Input::Command(c) => self.on_command(c),
        }
        self.settle();
        std::mem::take(&mut self.fx)
    }

    // ---- plumbing ----

    fn settle(&mut self) {
        for _ in 0..4096 {
            if self.need_replay {
                self.need_replay = false;
                self.replay();
                continue;
            }
            if !self.maybe_propose() && !self.need_replay {
                return;
            }
        }
    }

    fn now_ms(&self) -> u64 {
        self.now_us / 1000
    }

    fn delta_t_us(&self) -> u64 {
        self.cfg.delta_t_ms * 1000
    }

    fn f(&self) -> usize {
        self.table.fault_bound()
    }

    fn quorum(&self) -> usize {
        agreement_quorum(self.table.len())
    }

    fn others(&self) -> Vec<NodeId> {
        self.table.members().into_iter().filter(|m| *m != self.id).collect()
    }

    fn pick_primary(cfg: &NodeConfig, table: &ConfigTable, tip: &Digest) -> NodeId {
        let fallback = table.members().first().copied().unwrap_or(NodeId(0));
        if cfg.rotation {
            select_primary(table, tip).unwrap_or(fallback)
        } else {
            fallback
        }
    }

    fn log(&mut self, kind: EventKind, height: Option<u64>, digest: Option<Digest>, detail: String) {
        self.fx.outputs.push(Output::Log(LogEvent { kind, height, digest, cause: None, detail }));
    }

    fn log_drop(&mut self, cause: DropCause, detail: String) {
        self.fx.outputs.push(Output::Log(LogEvent {
            kind: EventKind::Drop,
            height: None,
            digest: None,
            cause: Some(cause),
            detail,
        }));
    }

    fn drop_env(&mut self, cause: DropCause, env: &Envelope) {
        self.log_drop(cause, format!("{} from {} v{}", env.kind(), env.sender, env.table_version));
    }

    fn set_timer(&mut self, kind: TimerKind, after_ms: u64) {
        self.fx.outputs.push(Output::SetTimer { kind, after_us: after_ms * 1000 });
    }

    fn cancel_timer(&mut self, kind: TimerKind) {
        self.fx.outputs.push(Output::CancelTimer(kind));
    }

    fn stamp_version(&self) -> u64 {
        if self.behavior == Behavior::StaleTable {
            self.table.version().wrapping_sub(1)
        } else {
            self.table.version()
        }
    }

    /// Bundle-authenticated send to `targets`.
    fn send_bundle(&mut self, targets: &[NodeId], body: Body, phase: Phase) -> Option<Arc<Envelope>> {
        if targets.is_empty() {
            return None;
        }
        let v = self.stamp_version();
        let bytes = signed_bytes(self.id, v, &body);
        let mut members = targets.to_vec();
        members.push(self.id);
        let mut bundle = match make_bundle(&mut self.issuer, &mut self.keys, self.id, &bytes, &members, phase) {
            Ok(b) => b,
            Err(e) => {
                self.log_drop(DropCause::KeyFailure, format!("outgoing {}: {e}", body.kind()));
                return None;
            }
        };
        self.fx.ops.tag_gen += bundle.tags.len() as u64;
        if self.behavior == Behavior::BadTags {
            for t in bundle.tags.values_mut() {
                t.bytes[0] ^= 1;
            }
        }
        let env = Arc::new(Envelope::from_parts(self.id, v, body, Auth::Bundle(bundle), bytes));
        for t in targets {
            self.fx.outputs.push(Output::Send { to: *t, env: env.clone() });
        }
        Some(env)
    }

    fn broadcast(&mut self, body: Body, phase: Phase) -> Option<Arc<Envelope>> {
        let others = self.others();
        let env = self.send_bundle(&others, body, phase);
        if let Some(env) = &env {
            if self.behavior == Behavior::Repudiate && !self.repudiated && phase == Phase::Transmit {
                self.repudiate(env.clone());
            }
        }
        env
    }

    /// Node-signed send, usable by and towards non-members.
    fn send_signed(&mut self, targets: &[NodeId], body: Body) {
        if targets.is_empty() {
            return;
        }
        let v = self.table.version();
        let bytes = signed_bytes(self.id, v, &body);
        let sig = match self.registry.sign(SignerId::Node(self.id), digest(&bytes).as_bytes()) {
            Ok(s) => s,
            Err(e) => {
                self.log_drop(DropCause::KeyFailure, format!("outgoing {}: {e}", body.kind()));
                return;
            }
        };
        self.fx.ops.sig_sign += 1;
        let env = Arc::new(Envelope::from_parts(self.id, v, body, Auth::Signature(sig), bytes));
        for t in targets {
            self.fx.outputs.push(Output::Send { to: *t, env: env.clone() });
        }
    }

    // ---- inputs ----

    fn on_start(&mut self) {
        if self.status != Status::Member {
            return;
        }
        let now = self.now_us;
        for m in self.others() {
            self.last_heard.insert(m, now);
        }
        self.set_timer(TimerKind::Liveness, self.cfg.liveness_tick_ms);
        self.refresh_round_timer(false);
    }

    fn on_recover(&mut self) {
        if self.status != Status::Member {
            return;
        }
        let now = self.now_us;
        for m in self.others() {
            self.last_heard.insert(m, now);
        }
        self.probes.clear();
        self.round_timer = false;
        self.batch_timer = false;
        self.sync_timer = false;
        self.log(EventKind::Recovered, Some(self.round.height), None, String::new());
        self.set_timer(TimerKind::Liveness, self.cfg.liveness_tick_ms);
        self.refresh_round_timer(true);
        let others = self.others();
        self.request_sync(None, others, true);
    }

    fn on_command(&mut self, c: Command) {
        match c {
            Command::SetBehavior(b) => {
                self.behavior = b;
                self.repudiated = false;
                self.log(EventKind::BehaviorChanged, None, None, format!("{b:?}"));
            }
            Command::Exit => {
                if self.status != Status::Member {
                    return;
                }
                self.log(EventKind::ExitRequested, None, None, String::new());
                let m = ExitMsg { leaver: self.id, timestamp_ms: self.now_ms() };
                self.broadcast(Body::Exit(m), Phase::Exit);
            }
            Command::Join { table } => {
                if self.status == Status::Member {
                    return;
                }
                self.reset_membership_state();
                self.table_digest = table.digest();
                self.table = table;
                self.status = Status::Joining;
                let members = self.table.members();
                self.keys.add_member(Some(self.id), self.id, &members);
                self.send_join();
            }
        }
    }

    fn on_timer(&mut self, kind: TimerKind) {
        match kind {
            TimerKind::Round => self.on_round_timeout(),
            TimerKind::Batch => {
                self.batch_timer = false;
                self.round.batch_fired = true;
            }
            TimerKind::Liveness => self.on_liveness_tick(),
            TimerKind::Sync => {
                self.sync_timer = false;
                if self.status == Status::Member && self.has_future_buffered() {
                    let peers: Vec<NodeId> = std::mem::take(&mut self.ahead).into_iter().collect();
                    self.request_sync(None, peers, true);
                }
            }
            TimerKind::JoinRetry => {
                if self.status == Status::Joining {
                    self.send_join();
                }
            }
        }
    }

    fn on_client_request(&mut self, r: Request) {
        if self.status != Status::Member {
            self.log_drop(DropCause::NotMember, format!("request from {}", r.client));
            return;
        }
        let d = r.digest();
        if self.pool.knows(&d) || self.chain.is_approved(&d) {
            self.log_drop(DropCause::DuplicateRequest, format!("request {}", d.short()));
            return;
        }
        if !self.request_valid(&r, d) {
            self.log_drop(DropCause::BadSignature, format!("request {}", d.short()));
            return;
        }
        self.pool.insert(r.clone());
        let env = Arc::new(Envelope::new(self.id, self.table.version(), Body::Forward(r), Auth::None));
        for m in self.others() {
            self.fx.outputs.push(Output::Send { to: m, env: env.clone() });
        }
        self.refresh_round_timer(false);
    }

    fn on_forward(&mut self, r: &Request) {
        let d = r.digest();
        if self.pool.knows(&d) || self.chain.is_approved(&d) || !self.request_valid(r, d) {
            return;
        }
        self.pool.insert(r.clone());
        self.refresh_round_timer(false);
    }

    fn request_valid(&mut self, r: &Request, d: Digest) -> bool {
        if self.verified.get(&d).is_some_and(|s| *s == r.signature.bytes) {
            return true;
        }
        self.fx.ops.sig_verify += 1;
        let ok =
            matches!(self.registry.verify(SignerId::Client(r.client), &r.payload(), &r.signature), Ok(Verdict::Accept));
        if ok {
            self.verified.insert(d, r.signature.bytes.clone());
        }
        ok
    }

    // ---- message intake ----

    fn on_message(&mut self, env: Arc<Envelope>) {
        if env.sender == self.id {
            return;
        }
        match self.status {
            Status::Member => {}
            Status::Joining => {
                if matches!(env.body, Body::Welcome(_)) && self.authenticate(&env) {
                    let Body::Welcome(m) = &env.body else { unreachable!() };
                    self.on_welcome(env.sender, m);
                }
                return;
            }
            Status::Outside | Status::Departed => return,
        }
        let kind = env.kind();
        let mine = self.table.version();
        if kind.version_strict() {
            if env.table_version < mine {
                self.drop_env(DropCause::StaleTable, &env);
                return;
            }
            if env.table_version - mine > MAX_VERSION_LEAD {
                self.drop_env(DropCause::StaleTable, &env);
                return;
            }
            if env.table_version > mine {
                // Authenticated on replay, once the sender's pairs exist here.
                self.buffer(env);
                return;
            }
        }
        if !self.authenticate(&env) {
            return;
        }
        self.heard_from(env.sender);
        if let Some(h) = env.body.height() {
            if h < self.round.height {
                return;
            }
            if h > self.round.height {
                self.buffer(env);
                return;
            }
        }
        self.dispatch(&env);
    }

    fn authenticate(&mut self, env: &Envelope) -> bool {
        let kind = env.kind();
        let ok = match &env.auth {
            Auth::Bundle(b) => {
                if matches!(env.body, Body::Forward(_) | Body::Join(_) | Body::Welcome(_)) {
                    false
                } else if !self.table.contains(env.sender) {
                    self.drop_env(DropCause::NotMember, env);
                    return false;
                } else if b.sender != env.sender {
                    false
                } else {
                    self.fx.ops.tag_verify += 1;
                    matches!(verify_bundle(self.id, env.signed_bytes(), b, &mut self.keys), Ok(Verdict::Accept))
                }
            }
            Auth::Signature(s) => {
                if !matches!(env.body, Body::Join(_) | Body::Welcome(_) | Body::SyncRequest(_) | Body::SyncResponse(_))
                {
                    false
                } else {
                    self.fx.ops.sig_verify += 1;
                    matches!(
                        self.registry.verify(SignerId::Node(env.sender), digest(env.signed_bytes()).as_bytes(), s),
                        Ok(Verdict::Accept)
                    )
                }
            }
            Auth::None => {
                if kind != super::messages::MessageKind::Forward {
                    false
                } else if !self.table.contains(env.sender) {
                    self.drop_env(DropCause::NotMember, env);
                    return false;
                } else {
                    true
                }
            }
        };
        if !ok {
            self.drop_env(DropCause::AuthFail, env);
        }
        ok
    }

    fn buffer(&mut self, env: Arc<Envelope>) {
        if self.buffered >= BUFFER_TOTAL {
            self.drop_env(DropCause::BufferFull, &env);
            return;
        }
        let sender = env.sender;
        let cap = self.cfg.buffer_per_peer.max(1);
        let q = self.buffers.entry(sender).or_default();
        if q.len() >= cap {
            q.pop_front();
            self.buffered -= 1;
        }
        q.push_back(env);
        self.buffered += 1;
        if self.table.contains(sender) {
            self.ahead.insert(sender);
            if !self.sync_timer && self.ahead.len() >= vouch_quorum(self.f()) {
                self.sync_timer = true;
                self.set_timer(TimerKind::Sync, self.cfg.sync_delay_ms);
            }
        }
    }

    fn has_future_buffered(&self) -> bool {
        let v = self.table.version();
        let h = self.round.height;
        self.buffers.values().flatten().any(|e| e.table_version > v || e.body.height().is_some_and(|eh| eh > h))
    }

    fn replay(&mut self) {
        let all: Vec<Arc<Envelope>> =
            std::mem::take(&mut self.buffers).into_values().flat_map(|q| q.into_iter()).collect();
        self.buffered = 0;
        for env in all {
            if self.status != Status::Member {
                return;
            }
            self.on_message(env);
        }
    }

    fn heard_from(&mut self, peer: NodeId) {
        self.last_heard.insert(peer, self.now_us);
        self.probes.remove(&peer);
        if self.evidence.get(&peer) == Some(&Evidence::Probe) {
            self.evidence.remove(&peer);
            self.log(EventKind::AccusationCancelled, None, None, format!("{peer}"));
        }
    }

    fn dispatch(&mut self, env: &Envelope) {
        let s = env.sender;
        match &env.body {
            Body::New(m) => self.on_new(s, m),
            Body::Transmit(m) => self.on_transmit(s, m),
            Body::Commit(m) => self.on_commit(s, m),
            Body::Checkpoint(m) => self.on_checkpoint(s, m),
            Body::Forward(r) => self.on_forward(r),
            Body::Join(m) => self.on_join(s, m),
            Body::Agr(m) => {
                self.agr.add((m.joiner, m.join_digest), s);
                self.check_join(m.joiner, m.join_digest);
            }
            Body::AgrC(m) => {
                self.agr_c.add((m.joiner, m.join_digest), s);
                self.check_join(m.joiner, m.join_digest);
            }
            Body::Welcome(_) => {}
            Body::Exit(m) => self.on_exit(s, m),
            Body::ExitBroad(m) => self.on_exit_broad(s, m.subject),
            Body::Lc(m) => self.on_lc(s, m.subject),
            Body::Unresp(m) => self.on_unresp(s, m.subject),
            Body::Sur(p) => {
                let ack = Body::SurAck(ProbeMsg { nonce: p.nonce });
                self.send_bundle(&[s], ack, Phase::Probe);
            }
            Body::SurAck(_) => {}
            Body::PrimaryMissing(m) => self.on_primary_missing(s, m),
            Body::Dispute(m) => self.on_dispute(s, m),
            Body::SyncRequest(m) => self.on_sync_request(s, m),
            Body::SyncResponse(m) => self.on_sync_response(s, m),
        }
    }

    // ---- normal round ----

    fn has_pending(&self) -> bool {
        !self.pool.is_empty()
            || self.pool.in_flight_len() > 0
            || self.lock.is_some()
            || self.round.new_digest.is_some()
            || !self.round.transmit_votes.is_empty()
            || !self.certified.is_empty()
    }

    fn refresh_round_timer(&mut self, restart: bool) {
        if self.status != Status::Member {
            return;
        }
        if self.has_pending() {
            if restart || !self.round_timer {
                self.round_timer = true;
                self.set_timer(TimerKind::Round, self.cfg.delta_t_ms);
            }
        } else if self.round_timer {
            self.round_timer = false;
            self.cancel_timer(TimerKind::Round);
        }
    }

    fn maybe_propose(&mut self) -> bool {
        if self.status != Status::Member
            || self.round.primary != self.id
            || self.round.proposed
            || self.round.new_digest.is_some()
            || self.lock.is_some()
            || self.behavior == Behavior::SilentPrimary
            || self.pool.is_empty()
        {
            return false;
        }
        if self.pool.len() < self.cfg.batch_limit && !self.round.batch_fired {
            if !self.batch_timer {
                self.batch_timer = true;
                self.set_timer(TimerKind::Batch, self.cfg.batch_ms);
            }
            return false;
        }
        self.propose();
        true
    }

    fn propose(&mut self) {
        self.round.proposed = true;
        if self.batch_timer {
            self.batch_timer = false;
            self.cancel_timer(TimerKind::Batch);
        }
        let requests = self.pool.take_batch(self.cfg.batch_limit.max(1));
        let decisions = self.decide(&requests);
        let parent = self.chain.tip_digest();
        let m = NewMsg {
            height: self.round.height,
            parent_hash: parent,
            ring_point: map_to_ring(&parent).0,
            proposer: self.id,
            commit_time_ms: self.now_ms(),
            batch_digest: batch_digest(&requests),
            decisions,
            requests,
        };
        let v = self.round.version;
        let height = m.height;
        let others = self.others();
        self.log(EventKind::Propose, Some(height), Some(new_digest(v, &m)), format!("requests={}", m.requests.len()));
        if self.behavior == Behavior::Equivocate && others.len() >= 2 {
            let mut twin = m.clone();
            twin.commit_time_ms += 1;
            let split = others.len().div_ceil(2);
            self.send_bundle(&others[..split], Body::New(m.clone()), Phase::New);
            self.send_bundle(&others[split..], Body::New(twin.clone()), Phase::New);
            self.accept_new(new_digest(v, &m), m);
            if self.round.height == height && self.round.version == v {
                self.round.new_digest = None;
                self.accept_new(new_digest(v, &twin), twin);
            }
        } else {
            self.broadcast(Body::New(m.clone()), Phase::New);
            self.accept_new(new_digest(v, &m), m);
        }
    }

    /// Per-request decision bits: signature valid, not yet approved on the
    /// chain, not repeated within the batch.
    fn decide(&mut self, requests: &[Request]) -> Vec<bool> {
        let mut seen = BTreeSet::new();
        requests
            .iter()
            .map(|r| {
                let d = r.digest();
                seen.insert(d) && !self.chain.is_approved(&d) && self.request_valid(r, d)
            })
            .collect()
    }

    fn on_new(&mut self, sender: NodeId, m: &NewMsg) {
        let nd = new_digest(self.round.version, m);
        if let Some(prev) = self.round.new_digest {
            if prev != nd && sender == self.round.primary {
                self.log(EventKind::Equivocation, Some(m.height), Some(nd), format!("{sender}"));
            }
            return;
        }
        if sender != self.round.primary || m.proposer != sender {
            self.log_drop(DropCause::WrongProposer, format!("NEW from {sender}, primary {}", self.round.primary));
            return;
        }
        if m.parent_hash != self.chain.tip_digest() || m.ring_point != map_to_ring(&m.parent_hash).0 {
            self.log_drop(DropCause::BadParent, format!("NEW from {sender}"));
            return;
        }
        if m.requests.is_empty()
            || m.requests.len() > self.cfg.batch_limit
            || m.decisions.len() != m.requests.len()
            || batch_digest(&m.requests) != m.batch_digest
        {
            self.log_drop(DropCause::BadBatch, format!("NEW from {sender}"));
            return;
        }
        self.accept_new(nd, m.clone());
    }

    fn accept_new(&mut self, nd: Digest, m: NewMsg) {
        let decisions = self.decide(&m.requests);
        let v = self.round.version;
        let block = build_block(v, &m, &decisions);
        let bd = block.digest();
        let t = TransmitMsg {
            height: m.height,
            table: self.table_digest,
            new_digest: nd,
            batch_digest: m.batch_digest,
            decisions,
            block_digest: bd,
        };
        self.round.new_digest = Some(nd);
        self.news.insert(nd, (v, m));
        self.candidates.insert(bd, block);
        let rejected = t.decisions.iter().filter(|d| !**d).count();
        self.log(EventKind::Transmit, Some(t.height), Some(bd), format!("rejected={rejected}"));
        self.refresh_round_timer(true);
        self.broadcast(Body::Transmit(t.clone()), Phase::Transmit);
        self.on_transmit(self.id, &t);
    }

    fn on_transmit(&mut self, sender: NodeId, t: &TransmitMsg) {
        if t.table != self.table_digest {
            self.log_drop(DropCause::TableMismatch, format!("TRANSMIT from {sender}"));
            return;
        }
        let c = transmit_content(self.round.version, t);
        let count = self.round.transmit_votes.add(c, sender);
        if !self.candidates.contains_key(&t.block_digest) {
            if let Some((v, m)) = self.news.get(&t.new_digest) {
                if m.requests.len() == t.decisions.len() {
                    let b = build_block(*v, m, &t.decisions);
                    if b.digest() == t.block_digest {
                        self.candidates.insert(t.block_digest, b);
                    }
                }
            }
        }
        if count >= self.quorum() && self.round.commit_vote.is_none() && self.lock.is_none_or(|l| l == t.block_digest) {
            self.cast_commit(t.block_digest, false);
        }
    }

    fn commit_msg(&self, bd: Digest, attach: bool) -> CommitMsg {
        let block = self.candidates.get(&bd);
        CommitMsg {
            height: self.round.height,
            table: self.table_digest,
            parent_hash: self.chain.tip_digest(),
            commit_time_ms: block.map_or(0, |b| b.header.commit_time_ms),
            merkle_root: block.map_or(Digest::ZERO, |b| b.header.merkle_root),
            block_digest: bd,
            block: if attach { block.cloned() } else { None },
        }
    }

    fn cast_commit(&mut self, bd: Digest, attach: bool) {
        self.lock = Some(bd);
        self.round.commit_vote = Some(bd);
        let msg = self.commit_msg(bd, attach);
        self.log(EventKind::CommitVote, Some(msg.height), Some(bd), String::new());
        self.broadcast(Body::Commit(msg), Phase::Commit);
        self.on_commit_vote(self.id, bd);
    }

    fn on_commit(&mut self, sender: NodeId, m: &CommitMsg) {
        if m.table != self.table_digest {
            self.log_drop(DropCause::TableMismatch, format!("COMMIT from {sender}"));
            return;
        }
        if let Some(b) = &m.block {
            if b.digest() == m.block_digest
                && b.header.height == self.round.height
                && b.header.parent_hash == self.chain.tip_digest()
                && b.body_consistent()
            {
                self.candidates.entry(m.block_digest).or_insert_with(|| b.clone());
            }
        }
        self.on_commit_vote(sender, m.block_digest);
    }

    fn on_commit_vote(&mut self, sender: NodeId, bd: Digest) {
        let count = self.round.commit_votes.add(bd, sender);
        if count >= self.quorum() {
            self.certified.insert(bd);
            self.try_finalize(bd);
            return;
        }
        if self.round.commit_vote.is_none() && self.lock.is_none() && count > self.f() {
            self.log(EventKind::LockAdopted, Some(self.round.height), Some(bd), String::new());
            self.cast_commit(bd, false);
        }
    }

    fn try_finalize(&mut self, bd: Digest) {
        if let Some(block) = self.candidates.get(&bd).cloned() {
            self.finalize(block, true);
        } else {
            let voters: Vec<NodeId> = self.round.commit_votes.voters(&bd).filter(|v| *v != self.id).collect();
            self.request_sync(Some(bd), voters, true);
        }
    }

    fn finalize(&mut self, block: Block, reply: bool) {
        let h = block.height();
        let d = match self.chain.append_block(block.clone()) {
            Ok(d) => d,
            Err(e) => {
                self.log_drop(DropCause::InvalidBlock, format!("height {h}: {e}"));
                return;
            }
        };
        let all: Vec<Digest> = block.proposals.iter().map(|p| p.request).collect();
        self.pool.finish(&all);
        self.pool.release_in_flight();
        self.keys.close_round(h);
        let approved = block.approved().count();
        self.log(
            EventKind::Commit,
            Some(h),
            Some(d),
            format!(
                "proposals={} approved={approved} proposer={} version={}",
                block.proposals.len(),
                block.header.proposer,
                block.header.table_version
            ),
        );
        if reply {
            self.send_replies(&block, d);
        }
        self.after_append();
    }

    fn after_append(&mut self) {
        self.check_checkpoint();
        self.enter_round();
    }

    fn send_replies(&mut self, block: &Block, d: Digest) {
        let mut per_client: BTreeMap<ClientId, Vec<(Digest, bool)>> = BTreeMap::new();
        for (r, p) in block.requests.iter().zip(&block.proposals) {
            per_client.entry(r.client).or_default().push((p.request, p.approved));
        }
        for (client, entries) in per_client {
            let payload = Reply::signing_payload(self.id, client, block.height(), &d, &entries);
            let Ok(signature) = self.registry.sign(SignerId::Node(self.id), &payload) else { continue };
            self.fx.ops.sig_sign += 1;
            let reply = Reply { node: self.id, client, height: block.height(), block_digest: d, entries, signature };
            self.fx.outputs.push(Output::Reply { client, reply: Arc::new(reply) });
        }
    }

    fn enter_round(&mut self) {
        let h = self.chain.tip_height() + 1;
        self.keys.begin_round(h);
        let primary = Self::pick_primary(&self.cfg, &self.table, &self.chain.tip_digest());
        self.round = Round::new(h, self.table.version(), primary);
        self.lock = None;
        self.news.clear();
        self.candidates.clear();
        self.certified.clear();
        self.ahead.clear();
        if self.batch_timer {
            self.batch_timer = false;
            self.cancel_timer(TimerKind::Batch);
        }
        self.evidence.retain(|_, e| !matches!(e, Evidence::Timeout(eh) if *eh < h));
        for votes in self.removal.values_mut() {
            votes.retain(|_, vh| vh.is_none_or(|vh| vh >= h));
        }
        self.sync_items.retain(|(ih, _), _| *ih >= h);
        self.sync_vouch.retain(|(ih, _)| *ih >= h);
        self.need_replay = true;
        self.refresh_round_timer(true);
    }

    fn rebroadcast_lock(&mut self, bd: Digest) {
        self.round.commit_vote = Some(bd);
        let msg = self.commit_msg(bd, true);
        self.broadcast(Body::Commit(msg), Phase::Commit);
        self.on_commit_vote(self.id, bd);
    }

    fn on_round_timeout(&mut self) {
        self.round_timer = false;
        if self.status != Status::Member || !self.has_pending() {
            return;
        }
        self.round.timeouts += 1;
        let h = self.round.height;
        let primary = self.round.primary;
        if self.round.timeouts == 1 && primary != self.id {
            self.log(EventKind::PrimaryMissing, Some(h), None, format!("{primary}"));
            self.evidence.entry(primary).or_insert(Evidence::Timeout(h));
            let m = PrimaryMissingMsg { missing: primary, height: h, timestamp_ms: self.now_ms() };
            self.broadcast(Body::PrimaryMissing(m), Phase::PrimaryMissing);
            self.check_removal(primary);
        } else {
            let others = self.others();
            self.request_sync(None, others, false);
        }
        if self.status != Status::Member || self.round.height != h {
            return;
        }
        if let Some(l) = self.lock {
            self.log(EventKind::Refinalize, Some(h), Some(l), "timeout".into());
            self.rebroadcast_lock(l);
        }
        if self.round.height == h {
            self.refresh_round_timer(true);
        }
    }

    // ---- membership ----

    fn reset_membership_state(&mut self) {
        self.evidence.clear();
        self.removal.clear();
        self.probes.clear();
        self.exit_seen.clear();
        self.exit_echo.clear();
        self.exit_broad_sent.clear();
        self.lc_votes.clear();
        self.lc_sent.clear();
        self.agr.clear();
        self.agr_sent.clear();
        self.agr_c.clear();
        self.agr_c_sent.clear();
        self.welcome_votes.clear();
        self.welcome_tables.clear();
        self.table_votes.clear();
        self.sync_tables.clear();
        self.buffers.clear();
        self.buffered = 0;
        self.ahead.clear();
    }

    fn apply_change(&mut self, change: MembershipChange, reason: &str) {
        match apply_membership_change(&self.table, change) {
            Ok(t) => self.install_table(t, reason),
            Err(e) => self.log_drop(DropCause::NotMember, format!("{change:?}: {e}")),
        }
    }

    fn install_table(&mut self, next: ConfigTable, reason: &str) {
        let old: BTreeSet<NodeId> = self.table.members().into_iter().collect();
        let new: BTreeSet<NodeId> = next.members().into_iter().collect();
        let members: Vec<NodeId> = new.iter().copied().collect();
        for gone in old.difference(&new).copied() {
            if gone != self.id {
                self.keys.remove_member(gone);
                self.issuer.forget(gone);
            }
            self.forget_peer(gone);
        }
        for added in new.difference(&old).copied() {
            self.keys.add_member(Some(self.id), added, &members);
            self.last_heard.insert(added, self.now_us);
        }
        self.table = next;
        self.table_digest = self.table.digest();
        self.table_votes.clear();
        self.sync_tables.clear();
        self.log(
            EventKind::TableChanged,
            Some(self.round.height),
            Some(self.table_digest),
            format!("version={} members={} reason={reason}", self.table.version(), self.table.len()),
        );
        if !self.table.contains(self.id) {
            self.depart("removed from table");
            return;
        }
        self.on_version_change();
    }

    fn forget_peer(&mut self, id: NodeId) {
        self.evidence.remove(&id);
        self.removal.remove(&id);
        for votes in self.removal.values_mut() {
            votes.remove(&id);
        }
        self.probes.remove(&id);
        self.last_heard.remove(&id);
        self.exit_seen.remove(&id);
        self.exit_echo.remove(&id);
        self.exit_echo.forget_sender(id);
        self.lc_votes.remove(&id);
        self.lc_votes.forget_sender(id);
        self.agr.forget_sender(id);
        self.agr_c.forget_sender(id);
        self.attests.forget_sender(id);
        self.checkpoint_votes.forget_sender(id);
        self.welcomed.remove(&id);
        if let Some(q) = self.buffers.remove(&id) {
            self.buffered -= q.len();
        }
    }

    fn on_version_change(&mut self) {
        if self.round.proposed && self.lock.is_none() {
            self.pool.release_in_flight();
        }
        let primary = Self::pick_primary(&self.cfg, &self.table, &self.chain.tip_digest());
        self.round = Round::new(self.round.height, self.table.version(), primary);
        self.news.clear();
        if self.batch_timer {
            self.batch_timer = false;
            self.cancel_timer(TimerKind::Batch);
        }
        self.need_replay = true;
        if let Some(l) = self.lock {
            self.log(EventKind::Refinalize, Some(self.round.height), Some(l), "table change".into());
            self.rebroadcast_lock(l);
        }
        self.refresh_round_timer(true);
    }

    fn depart(&mut self, why: &str) {
        if self.status == Status::Departed {
            return;
        }
        self.status = Status::Departed;
        self.pool.release_in_flight();
        self.round_timer = false;
        self.batch_timer = false;
        self.sync_timer = false;
        for k in [TimerKind::Round, TimerKind::Batch, TimerKind::Liveness, TimerKind::Sync, TimerKind::JoinRetry] {
            self.cancel_timer(k);
        }
        self.log(EventKind::Departed, Some(self.round.height), None, why.to_string());
    }

    fn peer_votes(&self, subject: NodeId) -> usize {
        self.removal.get(&subject).map_or(0, |v| {
            v.keys().filter(|voter| **voter != self.id && **voter != subject && self.table.contains(**voter)).count()
        })
    }

    fn record_removal_vote(&mut self, subject: NodeId, voter: NodeId, height: Option<u64>) {
        let votes = self.removal.entry(subject).or_default();
        match (votes.get(&voter), height) {
            (Some(None), _) => {}
            _ => {
                votes.insert(voter, height);
            }
        }
    }

    fn check_removal(&mut self, subject: NodeId) {
        if !self.table.contains(subject) || self.status != Status::Member {
            return;
        }
        let peers = self.peer_votes(subject);
        let need = exit_peers(self.f());
        if subject == self.id {
            if peers > need {
                self.depart("removal agreed by peers");
            }
            return;
        }
        if self.evidence.contains_key(&subject) && peers >= need {
            self.apply_change(MembershipChange::Exit(subject), "unresponsive");
        }
    }

    fn on_primary_missing(&mut self, sender: NodeId, m: &PrimaryMissingMsg) {
        if m.missing == sender || !self.table.contains(m.missing) {
            return;
        }
        self.record_removal_vote(m.missing, sender, Some(m.height));
        self.check_removal(m.missing);
    }

    fn on_unresp(&mut self, sender: NodeId, subject: NodeId) {
        if subject == sender || !self.table.contains(subject) {
            return;
        }
        self.record_removal_vote(subject, sender, None);
        if subject != self.id && !self.evidence.contains_key(&subject) && !self.probes.contains_key(&subject) {
            self.send_probe(subject);
        }
        self.check_removal(subject);
    }

    fn send_probe(&mut self, peer: NodeId) {
        self.nonce += 1;
        self.probes.insert(peer, self.now_us + self.delta_t_us());
        self.log(EventKind::Probe, None, None, format!("{peer}"));
        self.send_bundle(&[peer], Body::Sur(ProbeMsg { nonce: self.nonce }), Phase::Probe);
    }

    fn on_liveness_tick(&mut self) {
        if self.status != Status::Member {
            return;
        }
        self.set_timer(TimerKind::Liveness, self.cfg.liveness_tick_ms);
        if !self.cfg.probing {
            return;
        }
        let now = self.now_us;
        let dt = self.delta_t_us();
        for peer in self.others() {
            if self.status != Status::Member {
                return;
            }
            if let Some(&deadline) = self.probes.get(&peer) {
                if now >= deadline {
                    self.probes.remove(&peer);
                    self.probe_failed(peer);
                }
            } else if !self.evidence.contains_key(&peer)
                && now.saturating_sub(self.last_heard.get(&peer).copied().unwrap_or(now)) >= dt
            {
                self.send_probe(peer);
            }
        }
    }

    fn probe_failed(&mut self, peer: NodeId) {
        if self.evidence.contains_key(&peer) {
            return;
        }
        self.evidence.insert(peer, Evidence::Probe);
        self.log(EventKind::Unresponsive, Some(self.round.height), None, format!("{peer}"));
        self.broadcast(Body::Unresp(SubjectMsg { subject: peer }), Phase::Unresponsive);
        self.check_removal(peer);
    }

    fn on_exit(&mut self, sender: NodeId, m: &ExitMsg) {
        if m.leaver != sender || !self.table.contains(sender) {
            return;
        }
        self.exit_seen.insert(sender);
        self.exit_echo.add(sender, sender);
        self.echo_exit(sender);
        self.check_exit(sender);
    }

    fn echo_exit(&mut self, leaver: NodeId) {
        if self.exit_broad_sent.insert(leaver) {
            self.broadcast(Body::ExitBroad(SubjectMsg { subject: leaver }), Phase::Exit);
            self.exit_echo.add(leaver, self.id);
        }
    }

    fn on_exit_broad(&mut self, sender: NodeId, leaver: NodeId) {
        if !self.table.contains(leaver) || leaver == self.id {
            return;
        }
        self.exit_echo.add(leaver, sender);
        if !self.exit_seen.contains(&leaver)
            && self.exit_echo.count_excluding(&leaver, &[self.id, leaver]) >= vouch_quorum(self.f())
        {
            self.exit_seen.insert(leaver);
            self.echo_exit(leaver);
        }
        self.check_exit(leaver);
    }

    fn on_lc(&mut self, sender: NodeId, leaver: NodeId) {
        if !self.table.contains(leaver) {
            return;
        }
        self.lc_votes.add(leaver, sender);
        if leaver == self.id {
            if self.lc_votes.count_excluding(&leaver, &[self.id]) > exit_peers(self.f()) {
                self.depart("exit confirmed");
            }
            return;
        }
        self.check_exit(leaver);
    }

    fn check_exit(&mut self, leaver: NodeId) {
        if leaver == self.id || !self.table.contains(leaver) {
            return;
        }
        let need = exit_peers(self.f());
        if self.exit_seen.contains(&leaver)
            && self.exit_broad_sent.contains(&leaver)
            && !self.lc_sent.contains(&leaver)
            && self.exit_echo.count_excluding(&leaver, &[self.id]) >= need
        {
            self.lc_sent.insert(leaver);
            self.broadcast(Body::Lc(SubjectMsg { subject: leaver }), Phase::Exit);
            self.lc_votes.add(leaver, self.id);
        }
        if self.lc_sent.contains(&leaver) && self.lc_votes.count_excluding(&leaver, &[self.id, leaver]) >= need {
            self.apply_change(MembershipChange::Exit(leaver), "exit");
        }
    }

    fn send_join(&mut self) {
        let m = JoinMsg { joiner: self.id, timestamp_ms: self.now_ms(), known_version: self.table.version() };
        self.log(EventKind::JoinRequested, None, None, format!("known_version={}", m.known_version));
        let members = self.table.members();
        self.send_signed(&members, Body::Join(m));
        self.set_timer(TimerKind::JoinRetry, self.cfg.delta_t_ms);
    }

    fn on_join(&mut self, sender: NodeId, m: &JoinMsg) {
        if m.joiner != sender {
            return;
        }
        if self.table.contains(sender) {
            if self.welcomed.contains(&sender) {
                self.send_welcome(sender);
            }
            return;
        }
        if m.known_version < self.table.version() {
            self.log_drop(DropCause::StaleJoinerTable, format!("JOIN from {sender} v{}", m.known_version));
            return;
        }
        let key = (sender, join_key(sender, m.known_version));
        if self.agr_sent.insert(key) {
            self.broadcast(Body::Agr(AgrMsg { joiner: key.0, join_digest: key.1 }), Phase::Join);
            self.agr.add(key, self.id);
        }
        self.check_join(key.0, key.1);
    }

    fn check_join(&mut self, joiner: NodeId, jd: Digest) {
        if self.table.contains(joiner) {
            return;
        }
        let key = (joiner, jd);
        let need = join_peers(self.f());
        if self.agr_sent.contains(&key)
            && !self.agr_c_sent.contains(&key)
            && self.agr.count_excluding(&key, &[self.id]) >= need
        {
            self.agr_c_sent.insert(key);
            self.broadcast(Body::AgrC(AgrMsg { joiner, join_digest: jd }), Phase::Join);
            self.agr_c.add(key, self.id);
        }
        if self.agr_c_sent.contains(&key) && self.agr_c.count_excluding(&key, &[self.id]) >= need {
            self.agr.retain(|(j, _)| *j != joiner);
            self.agr_c.retain(|(j, _)| *j != joiner);
            self.agr_sent.retain(|(j, _)| *j != joiner);
            self.agr_c_sent.retain(|(j, _)| *j != joiner);
            self.welcomed.insert(joiner);
            self.apply_change(MembershipChange::Join(joiner), "join");
            if self.status == Status::Member {
                self.send_welcome(joiner);
            }
        }
    }

    fn send_welcome(&mut self, joiner: NodeId) {
        let m = WelcomeMsg {
            table: self.table.clone(),
            tip_height: self.chain.tip_height(),
            tip_digest: self.chain.tip_digest(),
        };
        self.send_signed(&[joiner], Body::Welcome(m));
    }

    fn on_welcome(&mut self, sender: NodeId, m: &WelcomeMsg) {
        if !self.table.contains(sender) || !m.table.contains(self.id) || m.table.version() <= self.table.version() {
            return;
        }
        let td = m.table.digest();
        self.welcome_tables.entry(td).or_insert_with(|| m.table.clone());
        if self.welcome_votes.add(td, sender) < vouch_quorum(self.f()) {
            return;
        }
        let table = self.welcome_tables.remove(&td).expect("stored above");
        self.reset_membership_state();
        let members = table.members();
        for m in &members {
            self.keys.add_member(Some(self.id), *m, &members);
        }
        self.table = table;
        self.table_digest = td;
        self.status = Status::Member;
        self.cancel_timer(TimerKind::JoinRetry);
        self.log(EventKind::Joined, None, Some(td), format!("version={}", self.table.version()));
        let now = self.now_us;
        for peer in self.others() {
            self.last_heard.insert(peer, now);
        }
        self.enter_round();
        self.set_timer(TimerKind::Liveness, self.cfg.liveness_tick_ms);
        let others = self.others();
        self.request_sync(None, others, true);
    }

    // ---- dispute ----

    fn repudiate(&mut self, env: Arc<Envelope>) {
        let Auth::Bundle(bundle) = &env.auth else { return };
        self.repudiated = true;
        let m = DisputeMsg {
            accused: self.id,
            verdict: DisputeVerdict::Deny,
            message: env.signed_bytes().to_vec(),
            bundle: bundle.clone(),
        };
        self.log(EventKind::DisputeRaised, Some(self.round.height), Some(bundle.digest), String::new());
        self.broadcast(Body::Dispute(m), Phase::Dispute);
    }

    fn own_tag_verifies(&mut self, m: &DisputeMsg) -> bool {
        if m.bundle.sender != m.accused || !self.table.contains(m.accused) {
            return false;
        }
        self.fx.ops.tag_verify += 1;
        matches!(verify_bundle(self.id, &m.message, &m.bundle, &mut self.keys), Ok(Verdict::Accept))
    }

    fn on_dispute(&mut self, sender: NodeId, m: &DisputeMsg) {
        let key = (m.accused, m.bundle.digest);
        match m.verdict {
            DisputeVerdict::Deny => {
                if sender != m.accused || self.attested.contains(&key) || !self.own_tag_verifies(m) {
                    return;
                }
                self.attested.insert(key);
                self.attests.add(key, self.id);
                self.log(EventKind::DisputeAttested, None, Some(m.bundle.digest), format!("{}", m.accused));
                let attest = DisputeMsg { verdict: DisputeVerdict::Attest, ..m.clone() };
                self.broadcast(Body::Dispute(attest), Phase::Dispute);
                self.adjudicate(m.accused, key);
            }
            DisputeVerdict::Attest => {
                if sender == m.accused || !self.own_tag_verifies(m) {
                    return;
                }
                self.attests.add(key, sender);
                self.adjudicate(m.accused, key);
            }
        }
    }

    fn adjudicate(&mut self, accused: NodeId, key: (NodeId, Digest)) {
        let count = self.attests.count_excluding(&key, &[accused]);
        let outcome = adjudicate_dispute(count, self.table.len(), self.f());
        if outcome == Ok(DisputeOutcome::RepudiationConfirmed)
            && self.evidence.get(&accused) != Some(&Evidence::Dispute)
        {
            self.evidence.insert(accused, Evidence::Dispute);
            self.log(EventKind::RepudiationConfirmed, None, Some(key.1), format!("{accused} attests={count}"));
            self.broadcast(Body::Unresp(SubjectMsg { subject: accused }), Phase::Unresponsive);
            self.check_removal(accused);
        }
    }

    // ---- checkpoint ----

    fn check_checkpoint(&mut self) {
        if let Ok((h, sd)) = self.chain.checkpoint_candidate(self.cfg.checkpoint_threshold) {
            if h > self.checkpoint_sent {
                self.checkpoint_sent = h;
                self.log(EventKind::Checkpoint, Some(h), Some(sd), String::new());
                self.broadcast(Body::Checkpoint(CheckpointMsg { height: h, state_digest: sd }), Phase::Checkpoint);
                self.checkpoint_votes.add((h, sd), self.id);
            }
        }
        let pending: Vec<(u64, Digest)> = self.checkpoint_votes.keys().copied().collect();
        for key in pending {
            self.evaluate_checkpoint(key);
        }
    }

    fn on_checkpoint(&mut self, sender: NodeId, m: &CheckpointMsg) {
        let key = (m.height, m.state_digest);
        self.checkpoint_votes.add(key, sender);
        self.evaluate_checkpoint(key);
    }

    fn evaluate_checkpoint(&mut self, key: (u64, Digest)) {
        let (h, sd) = key;
        if h <= self.chain.checkpoint_height() || h > self.chain.tip_height() {
            return;
        }
        if self.checkpoint_votes.count(&key) < self.quorum() {
            return;
        }
        match self.chain.state_digest_at(h) {
            Ok(mine) if mine == sd => {
                if self.chain.prune_below(h).is_ok() {
                    self.log(EventKind::Pruned, Some(h), Some(sd), String::new());
                }
                let dissent: Vec<((u64, Digest), Vec<NodeId>)> = self
                    .checkpoint_votes
                    .keys()
                    .filter(|(kh, kd)| *kh == h && *kd != sd)
                    .map(|k| (*k, self.checkpoint_votes.voters(k).collect()))
                    .collect();
                for (k, voters) in dissent {
                    for v in voters {
                        self.log(EventKind::CheckpointFlagged, Some(h), Some(k.1), format!("{v}"));
                    }
                }
                self.checkpoint_votes.retain(|(kh, _)| *kh > h);
            }
            Ok(mine) => {
                self.log(EventKind::CheckpointMismatch, Some(h), Some(mine), format!("quorum {}", sd.short()));
                self.checkpoint_votes.remove(&key);
            }
            Err(_) => {}
        }
    }

    // ---- state transfer ----

    fn request_sync(&mut self, want: Option<Digest>, targets: Vec<NodeId>, force: bool) {
        if targets.is_empty() {
            return;
        }
        let spacing = self.cfg.sync_delay_ms * 1000;
        if !force && self.last_sync_us.is_some_and(|t| self.now_us < t + spacing) {
            return;
        }
        self.last_sync_us = Some(self.now_us);
        let m = SyncRequestMsg { from_height: self.chain.tip_height() + 1, known_version: self.table.version(), want };
        self.log(EventKind::SyncRequested, Some(m.from_height), want, format!("peers={}", targets.len()));
        self.send_signed(&targets, Body::SyncRequest(m));
    }

    fn on_sync_request(&mut self, sender: NodeId, m: &SyncRequestMsg) {
        let tip = self.chain.tip_height();
        let from = m.from_height.max(1);
        let wanted = m.want.and_then(|w| self.candidates.get(&w)).filter(|b| b.height() == tip + 1).cloned();
        if tip < from && self.table.version() <= m.known_version && wanted.is_none() {
            return;
        }
        let mut headers = Vec::new();
        let mut blocks = Vec::new();
        if tip >= from {
            for h in from..=tip.min(from + SYNC_CHUNK - 1) {
                let Some(e) = self.chain.entry(h) else { break };
                match e.body() {
                    Some(b) => blocks.push(b.clone()),
                    None => headers.push((e.header.clone(), self.chain.approved_total_at(h).unwrap_or(0))),
                }
            }
        }
        if tip + 1 == from {
            blocks.extend(wanted);
        }
        let resp = SyncResponseMsg { table: self.table.clone(), tip_height: tip, headers, blocks };
        self.send_signed(&[sender], Body::SyncResponse(resp));
    }

    fn on_sync_response(&mut self, sender: NodeId, m: &SyncResponseMsg) {
        if !self.table.contains(sender) {
            return;
        }
        if m.table.version() > self.table.version() {
            let td = m.table.digest();
            self.sync_tables.entry(td).or_insert_with(|| m.table.clone());
            if self.table_votes.add(td, sender) >= vouch_quorum(self.f()) {
                let t = self.sync_tables.remove(&td).expect("stored above");
                self.install_table(t, "sync");
                if self.status != Status::Member {
                    return;
                }
            }
        }
        let tip = self.chain.tip_height();
        for (hdr, total) in &m.headers {
            if hdr.height <= tip {
                continue;
            }
            let key = (hdr.height, hdr.digest());
            self.sync_items.entry(key).or_insert_with(|| SyncItem::Header(hdr.clone(), *total));
            self.sync_vouch.add(key, sender);
        }
        for b in &m.blocks {
            if b.height() <= tip || !b.body_consistent() {
                continue;
            }
            let key = (b.height(), b.digest());
            let slot = self.sync_items.entry(key).or_insert_with(|| SyncItem::Block(b.clone()));
            if matches!(slot, SyncItem::Header(..)) {
                *slot = SyncItem::Block(b.clone());
            }
            self.sync_vouch.add(key, sender);
        }
        self.advance_from_sync();
        let served = (m.headers.len() + m.blocks.len()) as u64;
        if served >= SYNC_CHUNK && m.tip_height > self.chain.tip_height() {
            self.request_sync(None, vec![sender], true);
        }
    }

    fn advance_from_sync(&mut self) {
        while self.status == Status::Member {
            let next = self.chain.tip_height() + 1;
            let tip = self.chain.tip_digest();
            let need = vouch_quorum(self.f());
            let pick = self
                .sync_items
                .range((next, Digest::ZERO)..=(next, Digest([0xff; 32])))
                .find(|(k, item)| {
                    item.parent() == tip && (self.certified.contains(&k.1) || self.sync_vouch.count(k) >= need)
                })
                .map(|(k, _)| *k);
            let Some(key) = pick else { return };
            let item = self.sync_items.remove(&key).expect("found above");
            let certified = self.certified.contains(&key.1);
            match item {
                SyncItem::Block(b) => {
                    self.log(EventKind::SyncApplied, Some(key.0), Some(key.1), "block".into());
                    self.finalize(b, certified);
                }
                SyncItem::Header(h, total) => match self.chain.append_header_only(h, total) {
                    Ok(d) => {
                        self.keys.close_round(key.0);
                        self.log(EventKind::SyncApplied, Some(key.0), Some(d), "header".into());
                        self.after_append();
                    }
                    Err(e) => {
                        self.log_drop(DropCause::InvalidBlock, format!("height {}: {e}", key.0));
                        return;
                    }
                },
            }
            if self.chain.tip_height() < next {
                return;
            }
        }
    }
}
