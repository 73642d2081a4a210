//! The event loop.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use qdbft_core::auth::{KeyRegistry, SignerId, TagMode};
use qdbft_core::consensus::{
    Behavior, Client, ClientConfig, ClientEvent, Command, Envelope, EventKind, Input, LogEvent, Node, NodeSnapshot,
    OpCounts, Output, Reply, Status, TimerKind,
};
use qdbft_core::ledger::Request;
use qdbft_core::qkd::{ConsumptionReport, Phase};
use qdbft_core::ring::{setup_table, ConfigTable};
use qdbft_core::{ClientId, Digest, NodeId};

use crate::config::{FaultKind, MembershipAction, SimConfig};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Endpoint {
    Node(NodeId),
    Client(usize),
}

#[derive(Debug, Clone)]
enum Event {
    Start(NodeId),
    Deliver { to: NodeId, env: Arc<Envelope> },
    Timer { node: NodeId, kind: TimerKind, gen: u64 },
    Request { to: NodeId, request: Request },
    Reply { client: usize, reply: Arc<Reply> },
    ClientTick(usize),
    Submit(usize),
    Wake(NodeId),
    FaultStart(usize),
    FaultEnd(usize),
    Membership(usize),
}

#[derive(Debug)]
struct Scheduled {
    at: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Work waiting for a busy node, in arrival order.
#[derive(Debug)]
enum Queued {
    Input(Input),
    Timer(TimerKind, u64),
}

#[derive(Debug)]
struct Slot {
    node: Node,
    busy_until: u64,
    crashed: bool,
    timers: BTreeMap<TimerKind, u64>,
    inbox: VecDeque<Queued>,
    wake_at: Option<u64>,
}

impl Slot {
    fn new(node: Node, busy_until: u64) -> Slot {
        Slot { node, busy_until, crashed: false, timers: BTreeMap::new(), inbox: VecDeque::new(), wake_at: None }
    }
}

#[derive(Debug)]
struct ClientSlot {
    client: Client,
    remaining: usize,
    tick_at: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub t_us: u64,
    #[serde(flatten)]
    pub entry: LogEntry,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum LogEntry {
    Node {
        node: NodeId,
        #[serde(flatten)]
        event: LogEvent,
    },
    Client {
        client: ClientId,
        #[serde(flatten)]
        event: ClientEvent,
    },
    Sim {
        node: NodeId,
        what: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SafetyViolation {
    pub height: u64,
    pub first: (NodeId, Digest),
    pub second: (NodeId, Digest),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconfigKind {
    Join,
    Exit,
    Removal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reconfig {
    pub kind: ReconfigKind,
    pub subject: NodeId,
    pub start_us: u64,
    pub end_us: Option<u64>,
    pub version: Option<u64>,
}

impl Reconfig {
    pub fn duration_us(&self) -> Option<u64> {
        self.end_us.map(|e| e - self.start_us)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    HeightReached,
    ClientsDone,
    TimeLimit,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRecord {
    pub request: Digest,
    pub submitted_us: u64,
    pub latency_us: Option<u64>,
    pub height: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub stop: StopReason,
    pub end_us: u64,
    pub events: u64,
    pub messages: u64,
    pub dropped: u64,
    /// Lowest tip among live honest members.
    pub height: u64,
    /// Earliest honest commit time per height, from height 1.
    pub commit_times_us: Vec<(u64, u64)>,
    pub violations: Vec<SafetyViolation>,
    pub reconfigs: Vec<Reconfig>,
    pub requests: Vec<ClientRecord>,
    pub ops: OpCounts,
    pub snapshots: Vec<NodeSnapshot>,
}

impl RunReport {
    /// Gaps between consecutive commit times, skipping heights up to `warmup`.
    pub fn round_durations_us(&self, warmup: u64) -> Vec<u64> {
        self.commit_times_us
            .windows(2)
            .filter(|w| w[0].0 >= warmup.max(1) && w[1].0 == w[0].0 + 1)
            .map(|w| w[1].1 - w[0].1)
            .collect()
    }

    pub fn committed_requests(&self) -> usize {
        self.requests.iter().filter(|r| r.latency_us.is_some()).count()
    }
}

/// Decides whether a message from the first node to the second is
/// delivered. Rejected messages count as dropped.
pub type DeliveryFilter = Box<dyn Fn(NodeId, NodeId, &Envelope) -> bool + Send + Sync>;

pub struct Simulation {
    filter: Option<DeliveryFilter>,
    cfg: SimConfig,
    now_us: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    registry: KeyRegistry,
    slots: BTreeMap<NodeId, Slot>,
    clients: Vec<ClientSlot>,
    link_clock: BTreeMap<(Endpoint, Endpoint), u64>,
    log: Vec<LogRecord>,
    events: u64,
    messages: u64,
    dropped: u64,
    ops: OpCounts,
    commits: BTreeMap<u64, BTreeMap<NodeId, (u64, Digest)>>,
    violations: Vec<SafetyViolation>,
    reconfigs: Vec<Reconfig>,
    byzantine: BTreeSet<NodeId>,
    crashed_ever: BTreeSet<NodeId>,
    scripted_left: usize,
    client_version: u64,
    requests: BTreeMap<Digest, ClientRecord>,
    stop: Option<StopReason>,
}

/// Every identity a run may use: initial members, scripted joiners and
/// clients.
fn build_registry(cfg: &SimConfig) -> KeyRegistry {
    let mut r = KeyRegistry::new(cfg.seed ^ 0x5eed_0fc0_ffee);
    for id in cfg.initial_ids() {
        r.register(SignerId::Node(id));
    }
    for m in &cfg.membership {
        if let MembershipAction::Join { node } = m.action {
            r.register(SignerId::Node(node));
        }
    }
    for c in 1..=cfg.workload.clients as u64 {
        r.register(SignerId::Client(ClientId(c)));
    }
    r
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Simulation, SimError> {
        cfg.validate()?;
        let registry = build_registry(&cfg);
        let ids = cfg.initial_ids();
        let table =
            setup_table(&ids, cfg.virtual_count, cfg.placement).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let mut node_cfg = cfg.node.clone();
        node_cfg.key_seed = node_cfg.key_seed.wrapping_add(cfg.seed);
        let mut slots = BTreeMap::new();
        for id in &ids {
            let node = Node::new(*id, table.clone(), registry.clone(), node_cfg.clone())
                .map_err(|e| SimError::Node(e.to_string()))?;
            slots.insert(*id, Slot::new(node, 0));
        }
        let timeout_ms = cfg.workload.timeout_ms.unwrap_or(cfg.node.delta_t_ms);
        let clients = (1..=cfg.workload.clients as u64)
            .map(|c| ClientSlot {
                client: Client::new(
                    ClientConfig { id: ClientId(c), timeout_ms, seed: cfg.seed.wrapping_mul(31).wrapping_add(c) },
                    registry.clone(),
                    ids.clone(),
                ),
                remaining: cfg.workload.requests_per_client,
                tick_at: None,
            })
            .collect();
        let byzantine = cfg
            .faults
            .iter()
            .filter(|f| !matches!(f.kind, FaultKind::Honest | FaultKind::Crash))
            .map(|f| f.node)
            .collect();
        let mut sim = Simulation {
            filter: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now_us: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            registry,
            slots,
            clients,
            link_clock: BTreeMap::new(),
            log: Vec::new(),
            events: 0,
            messages: 0,
            dropped: 0,
            ops: OpCounts::default(),
            commits: BTreeMap::new(),
            violations: Vec::new(),
            reconfigs: Vec::new(),
            byzantine,
            crashed_ever: BTreeSet::new(),
            scripted_left: 0,
            client_version: 0,
            requests: BTreeMap::new(),
            stop: None,
            cfg,
        };
        for id in ids {
            sim.schedule(0, Event::Start(id));
        }
        for (i, f) in sim.cfg.faults.clone().iter().enumerate() {
            if !sim.slots.contains_key(&f.node) && !sim.is_scripted_joiner(f.node) {
                return Err(SimError::UnknownNode(f.node));
            }
            sim.scripted_left += 1;
            sim.schedule(f.from_ms * 1000, Event::FaultStart(i));
            if let Some(u) = f.until_ms {
                sim.scripted_left += 1;
                sim.schedule(u * 1000, Event::FaultEnd(i));
            }
        }
        for (i, m) in sim.cfg.membership.clone().iter().enumerate() {
            sim.scripted_left += 1;
            sim.schedule(m.at_ms * 1000, Event::Membership(i));
        }
        let start = sim.cfg.workload.start_ms * 1000;
        let interval = sim.cfg.workload.interval_ms * 1000;
        for c in 0..sim.clients.len() {
            let n = sim.cfg.workload.requests_per_client;
            if interval == 0 {
                for _ in 0..n {
                    sim.schedule(start, Event::Submit(c));
                }
            } else if n > 0 {
                sim.schedule(start, Event::Submit(c));
            }
        }
        Ok(sim)
    }

    fn is_scripted_joiner(&self, id: NodeId) -> bool {
        self.cfg.membership.iter().any(|m| m.action == MembershipAction::Join { node: id })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.slots.get(&id).map(|s| &s.node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.slots.values().map(|s| &s.node)
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn log_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn violations(&self) -> &[SafetyViolation] {
        &self.violations
    }

    pub fn is_byzantine(&self, id: NodeId) -> bool {
        self.byzantine.contains(&id)
    }

    /// Members that are neither Byzantine nor currently crashed.
    pub fn live_honest(&self) -> Vec<NodeId> {
        self.slots
            .iter()
            .filter(|(id, s)| !s.crashed && !self.byzantine.contains(id) && s.node.status() == Status::Member)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Key draws attributed to `round`, summed over every node's pool.
    pub fn key_report(&self, round: u64) -> ConsumptionReport {
        let mut total = ConsumptionReport::default();
        for s in self.slots.values() {
            if let Ok(r) = s.node.keys().consumption_report(round) {
                total.merge(&r);
            }
        }
        total
    }

    pub fn transmit_commit_keys(&self, round: u64) -> u64 {
        let r = self.key_report(round);
        r.count(Phase::Transmit) + r.count(Phase::Commit)
    }

    /// Schedules a fault from now on; `from_ms` is relative to the current time.
    pub fn inject_fault(&mut self, mut entry: crate::config::FaultEntry) -> Result<(), SimError> {
        if !self.slots.contains_key(&entry.node) {
            return Err(SimError::UnknownNode(entry.node));
        }
        let base = self.now_us / 1000;
        entry.from_ms += base;
        entry.until_ms = entry.until_ms.map(|u| u + base);
        if !matches!(entry.kind, FaultKind::Honest | FaultKind::Crash) {
            self.byzantine.insert(entry.node);
        }
        let i = self.cfg.faults.len();
        self.scripted_left += 1;
        self.schedule(entry.from_ms * 1000, Event::FaultStart(i));
        if let Some(u) = entry.until_ms {
            self.scripted_left += 1;
            self.schedule(u * 1000, Event::FaultEnd(i));
        }
        self.cfg.faults.push(entry);
        Ok(())
    }

    /// Installs a delivery filter, for targeted message suppression.
    pub fn set_filter(&mut self, filter: DeliveryFilter) {
        self.filter = Some(filter);
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn record(&mut self, entry: LogEntry) {
        self.log.push(LogRecord { t_us: self.now_us, entry });
    }

    /// Runs to a stop condition.
    pub fn run(&mut self) -> Result<RunReport, SimError> {
        while self.stop.is_none() {
            if self.events >= self.cfg.event_budget {
                return Err(SimError::NonQuiescent { events: self.events, time_us: self.now_us });
            }
            if !self.step() {
                // Nothing left to do: treat as done only if the clients are.
                self.stop = Some(if self.clients_done() { StopReason::ClientsDone } else { StopReason::TimeLimit });
            }
        }
        Ok(self.report())
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(next)) = self.queue.pop() else { return false };
        if let Some(limit) = self.cfg.stop.max_time_ms {
            if next.at > limit * 1000 {
                self.now_us = limit * 1000;
                self.stop = Some(StopReason::TimeLimit);
                return true;
            }
        }
        self.now_us = next.at;
        self.events += 1;
        self.process(next.event);
        self.check_stop();
        true
    }

    /// Runs until virtual time reaches `t_us` or a stop condition fires.
    pub fn run_until(&mut self, t_us: u64) -> Result<(), SimError> {
        while self.stop.is_none() {
            match self.queue.peek() {
                Some(Reverse(s)) if s.at <= t_us => {}
                _ => break,
            }
            if self.events >= self.cfg.event_budget {
                return Err(SimError::NonQuiescent { events: self.events, time_us: self.now_us });
            }
            self.step();
        }
        self.now_us = self.now_us.max(t_us);
        Ok(())
    }

    /// Keeps processing for `extra_us` of virtual time past a stop, so
    /// in-flight rounds and syncs can land before state is compared.
    pub fn drain(&mut self, extra_us: u64) {
        let until = self.now_us + extra_us;
        while let Some(Reverse(s)) = self.queue.peek() {
            if s.at > until || self.events >= self.cfg.event_budget {
                break;
            }
            let Reverse(next) = self.queue.pop().expect("peeked");
            self.now_us = next.at;
            self.events += 1;
            self.process(next.event);
        }
        self.now_us = until;
    }

    fn clients_done(&self) -> bool {
        self.clients.iter().all(|c| c.remaining == 0 && c.client.pending_len() == 0) && self.scripted_left == 0
    }

    fn check_stop(&mut self) {
        if let Some(h) = self.cfg.stop.max_height {
            let live = self.live_honest();
            if !live.is_empty() && live.iter().all(|id| self.slots[id].node.chain().tip_height() >= h) {
                self.stop = Some(StopReason::HeightReached);
                return;
            }
        }
        if self.cfg.stop.until_clients_done && self.clients_done() && self.reconfigs.iter().all(|r| r.end_us.is_some())
        {
            self.stop = Some(StopReason::ClientsDone);
        }
    }

    fn process(&mut self, event: Event) {
        match event {
            Event::Start(id) => self.feed(id, Input::Start),
            Event::Deliver { to, env } => self.arrive(to, Queued::Input(Input::Message(env))),
            Event::Timer { node, kind, gen } => self.arrive(node, Queued::Timer(kind, gen)),
            Event::Request { to, request } => self.arrive(to, Queued::Input(Input::ClientRequest(request))),
            Event::Wake(id) => self.wake(id),
            Event::Reply { client, reply } => {
                let now = self.now_us;
                let events = self.clients[client].client.on_reply(now, &reply);
                let id = self.clients[client].client.id();
                for ev in events {
                    if let ClientEvent::Accepted { request, height, latency_us, .. } = &ev {
                        if let Some(r) = self.requests.get_mut(request) {
                            r.latency_us = Some(*latency_us);
                            r.height = Some(*height);
                        }
                    }
                    self.record(LogEntry::Client { client: id, event: ev });
                }
            }
            Event::ClientTick(c) => {
                self.clients[c].tick_at = None;
                let now = self.now_us;
                let out = self.clients[c].client.on_tick(now);
                let id = self.clients[c].client.id();
                let mut logged = BTreeSet::new();
                for (to, request, ev) in out {
                    if logged.insert(request.digest()) {
                        self.record(LogEntry::Client { client: id, event: ev });
                    }
                    self.send_request(c, to, request);
                }
                self.ensure_tick(c);
            }
            Event::Submit(c) => self.submit(c),
            Event::FaultStart(i) => {
                self.scripted_left -= 1;
                self.fault(i, true)
            }
            Event::FaultEnd(i) => {
                self.scripted_left -= 1;
                self.fault(i, false)
            }
            Event::Membership(i) => {
                self.scripted_left -= 1;
                self.membership(i)
            }
        }
    }

    /// Runs `item` now if the node is idle, otherwise queues it behind
    /// earlier work.
    fn arrive(&mut self, id: NodeId, item: Queued) {
        let now = self.now_us;
        let Some(s) = self.slots.get_mut(&id) else { return };
        if s.crashed {
            return;
        }
        if s.busy_until > now || !s.inbox.is_empty() {
            s.inbox.push_back(item);
            self.schedule_wake(id);
            return;
        }
        self.run_item(id, item);
    }

    fn schedule_wake(&mut self, id: NodeId) {
        let s = self.slots.get_mut(&id).expect("present");
        if s.wake_at.is_none() && !s.inbox.is_empty() {
            let at = s.busy_until.max(self.now_us);
            s.wake_at = Some(at);
            self.schedule(at, Event::Wake(id));
        }
    }

    fn wake(&mut self, id: NodeId) {
        let Some(s) = self.slots.get_mut(&id) else { return };
        s.wake_at = None;
        if s.crashed {
            return;
        }
        if let Some(item) = s.inbox.pop_front() {
            self.run_item(id, item);
        }
        self.schedule_wake(id);
    }

    fn run_item(&mut self, id: NodeId, item: Queued) {
        match item {
            Queued::Input(input) => self.feed(id, input),
            Queued::Timer(kind, gen) => {
                if self.slots[&id].timers.get(&kind) == Some(&gen) {
                    self.feed(id, Input::Timer(kind));
                }
            }
        }
    }

    fn charge_ns(&self, ops: &OpCounts) -> u64 {
        let c = &self.cfg.compute;
        let tag = match self.cfg.node.tag_mode {
            TagMode::ToeplitzIts => c.toeplitz_tag_ns,
            TagMode::Hmac => c.hmac_tag_ns,
        };
        (ops.tag_gen + ops.tag_verify) * tag + ops.sig_sign * c.sign_ns + ops.sig_verify * c.verify_ns
    }

    fn feed(&mut self, id: NodeId, input: Input) {
        let now = self.now_us;
        let Some(slot) = self.slots.get_mut(&id) else { return };
        if slot.crashed {
            return;
        }
        let fx = slot.node.handle(now, input);
        self.ops.add(&fx.ops);
        let depart = now + self.charge_ns(&fx.ops).div_ceil(1000);
        self.slots.get_mut(&id).expect("present").busy_until = depart;
        let mut table_events = false;
        for out in fx.outputs {
            match out {
                Output::Send { to, env } => {
                    self.messages += 1;
                    if !self.slots.contains_key(&to) || self.filter.as_ref().is_some_and(|f| !f(id, to, &env)) {
                        self.dropped += 1;
                        continue;
                    }
                    match self.sample(Endpoint::Node(id), Endpoint::Node(to), depart) {
                        Some(at) => self.schedule(at, Event::Deliver { to, env }),
                        None => self.dropped += 1,
                    }
                }
                Output::Reply { client, reply } => {
                    let c = (client.0 as usize).wrapping_sub(1);
                    if c >= self.clients.len() {
                        continue;
                    }
                    if let Some(at) = self.sample(Endpoint::Node(id), Endpoint::Client(c), depart) {
                        self.schedule(at, Event::Reply { client: c, reply });
                    }
                }
                Output::SetTimer { kind, after_us } => {
                    let slot = self.slots.get_mut(&id).expect("present");
                    let gen = slot.timers.entry(kind).or_insert(0);
                    *gen += 1;
                    let gen = *gen;
                    self.schedule(depart + after_us, Event::Timer { node: id, kind, gen });
                }
                Output::CancelTimer(kind) => {
                    *self.slots.get_mut(&id).expect("present").timers.entry(kind).or_insert(0) += 1;
                }
                Output::Log(event) => {
                    match event.kind {
                        EventKind::Commit | EventKind::SyncApplied => {
                            if let (Some(h), Some(d)) = (event.height, event.digest) {
                                self.note_commit(id, h, d);
                            }
                        }
                        EventKind::TableChanged | EventKind::Joined | EventKind::Departed => table_events = true,
                        _ => {}
                    }
                    self.record(LogEntry::Node { node: id, event });
                }
            }
        }
        if table_events {
            self.on_table_event();
        }
    }

    /// Delivery time on a link, or `None` if the message is lost.
    fn sample(&mut self, src: Endpoint, dst: Endpoint, depart: u64) -> Option<u64> {
        let (base, jitter, drop) = match (src, dst) {
            (Endpoint::Node(a), Endpoint::Node(b)) => self.cfg.latency.link(a, b),
            _ => (self.cfg.latency.base_ms, self.cfg.latency.jitter_ms, 0.0),
        };
        let j = if jitter > 0 { self.rng.gen_range(0..=jitter * 1000) } else { 0 };
        if drop > 0.0 && self.rng.gen::<f64>() < drop {
            return None;
        }
        let mut at = depart + base * 1000 + j;
        if self.cfg.latency.fifo {
            let last = self.link_clock.entry((src, dst)).or_insert(0);
            at = at.max(*last);
            *last = at;
        }
        Some(at)
    }

    fn note_commit(&mut self, id: NodeId, h: u64, d: Digest) {
        let at = self.now_us;
        let honest = !self.byzantine.contains(&id);
        let per = self.commits.entry(h).or_default();
        if honest {
            if let Some((other, (_, od))) =
                per.iter().find(|(o, (_, od))| !self.byzantine.contains(o) && *od != d).map(|(o, v)| (*o, *v))
            {
                self.violations.push(SafetyViolation { height: h, first: (other, od), second: (id, d) });
            }
        }
        per.insert(id, (at, d));
    }

    fn send_request(&mut self, c: usize, to: NodeId, request: Request) {
        if !self.slots.contains_key(&to) {
            return;
        }
        if let Some(at) = self.sample(Endpoint::Client(c), Endpoint::Node(to), self.now_us) {
            self.schedule(at, Event::Request { to, request });
        }
    }

    fn ensure_tick(&mut self, c: usize) {
        let Some(d) = self.clients[c].client.next_deadline() else { return };
        if self.clients[c].tick_at.is_none_or(|t| t > d) {
            self.clients[c].tick_at = Some(d);
            self.schedule(d, Event::ClientTick(c));
        }
    }

    fn submit(&mut self, c: usize) {
        if self.clients[c].remaining == 0 {
            return;
        }
        self.clients[c].remaining -= 1;
        let now = self.now_us;
        let op = vec![c as u8; self.cfg.workload.operation_bytes];
        let Ok((request, to)) = self.clients[c].client.submit(now, op) else { return };
        let d = request.digest();
        self.requests.insert(d, ClientRecord { request: d, submitted_us: now, latency_us: None, height: None });
        let id = self.clients[c].client.id();
        self.record(LogEntry::Client { client: id, event: ClientEvent::Submitted { request: d, to } });
        self.send_request(c, to, request);
        self.ensure_tick(c);
        let interval = self.cfg.workload.interval_ms * 1000;
        if interval > 0 && self.clients[c].remaining > 0 {
            self.schedule(now + interval, Event::Submit(c));
        }
    }

    fn fault(&mut self, i: usize, start: bool) {
        let f = self.cfg.faults[i].clone();
        if !self.slots.contains_key(&f.node) {
            return;
        }
        let what = format!("{:?} {}", f.kind, if start { "start" } else { "end" });
        self.record(LogEntry::Sim { node: f.node, what });
        match (f.kind, start) {
            (FaultKind::Honest, _) => {}
            (FaultKind::Crash, true) => {
                let slot = self.slots.get_mut(&f.node).expect("present");
                slot.crashed = true;
                slot.inbox.clear();
                for gen in slot.timers.values_mut() {
                    *gen += 1;
                }
                self.crashed_ever.insert(f.node);
                if slot.node.status() == Status::Member {
                    self.reconfigs.push(Reconfig {
                        kind: ReconfigKind::Removal,
                        subject: f.node,
                        start_us: self.now_us,
                        end_us: None,
                        version: None,
                    });
                }
            }
            (FaultKind::Crash, false) => {
                let slot = self.slots.get_mut(&f.node).expect("present");
                slot.crashed = false;
                slot.busy_until = self.now_us;
                // A removal that never completed is moot once the node is back.
                for r in &mut self.reconfigs {
                    if r.kind == ReconfigKind::Removal && r.subject == f.node && r.end_us.is_none() {
                        r.end_us = Some(self.now_us);
                    }
                }
                self.feed(f.node, Input::Recover);
            }
            (kind, true) => {
                let b = match kind {
                    FaultKind::SilentPrimary => Behavior::SilentPrimary,
                    FaultKind::Equivocate => Behavior::Equivocate,
                    FaultKind::BadTags => Behavior::BadTags,
                    FaultKind::Repudiate => Behavior::Repudiate,
                    FaultKind::StaleTable => Behavior::StaleTable,
                    FaultKind::Honest | FaultKind::Crash => Behavior::Honest,
                };
                self.feed(f.node, Input::Command(Command::SetBehavior(b)));
            }
            (_, false) => self.feed(f.node, Input::Command(Command::SetBehavior(Behavior::Honest))),
        }
    }

    /// Table of the lowest-id live honest member.
    fn reference_table(&self) -> Option<ConfigTable> {
        self.live_honest().first().map(|id| self.slots[id].node.table().clone())
    }

    fn membership(&mut self, i: usize) {
        let m = self.cfg.membership[i];
        match m.action {
            MembershipAction::Join { node } => {
                let Some(table) = self.reference_table() else { return };
                if !self.slots.contains_key(&node) {
                    let mut node_cfg = self.cfg.node.clone();
                    node_cfg.key_seed = node_cfg.key_seed.wrapping_add(self.cfg.seed);
                    match Node::new(node, table.clone(), self.registry.clone(), node_cfg) {
                        Ok(n) => {
                            self.slots.insert(node, Slot::new(n, self.now_us));
                        }
                        Err(e) => {
                            self.record(LogEntry::Sim { node, what: format!("join setup failed: {e}") });
                            return;
                        }
                    }
                }
                self.reconfigs.push(Reconfig {
                    kind: ReconfigKind::Join,
                    subject: node,
                    start_us: self.now_us,
                    end_us: None,
                    version: None,
                });
                self.feed(node, Input::Command(Command::Join { table }));
            }
            MembershipAction::Exit { node } => {
                if !self.slots.contains_key(&node) {
                    return;
                }
                self.reconfigs.push(Reconfig {
                    kind: ReconfigKind::Exit,
                    subject: node,
                    start_us: self.now_us,
                    end_us: None,
                    version: None,
                });
                self.feed(node, Input::Command(Command::Exit));
            }
        }
    }

    fn on_table_event(&mut self) {
        let live = self.live_honest();
        let Some(first) = live.first() else { return };
        let table = self.slots[first].node.table();
        let digest = table.digest();
        let converged = live.iter().all(|id| self.slots[id].node.table().digest() == digest);
        if converged && table.version() > self.client_version {
            self.client_version = table.version();
            let members = table.members();
            for c in &mut self.clients {
                c.client.set_nodes(members.clone());
            }
        }
        if !converged {
            return;
        }
        let table = table.clone();
        let now = self.now_us;
        for r in &mut self.reconfigs {
            if r.end_us.is_some() {
                continue;
            }
            let done = match r.kind {
                ReconfigKind::Join => table.contains(r.subject) && live.contains(&r.subject),
                ReconfigKind::Exit | ReconfigKind::Removal => !table.contains(r.subject),
            };
            if done {
                r.end_us = Some(now);
                r.version = Some(table.version());
            }
        }
    }

    pub fn report(&self) -> RunReport {
        let live = self.live_honest();
        let height = live.iter().map(|id| self.slots[id].node.chain().tip_height()).min().unwrap_or(0);
        let commit_times_us = self
            .commits
            .iter()
            .filter_map(|(h, per)| {
                per.iter().filter(|(id, _)| !self.byzantine.contains(id)).map(|(_, (t, _))| *t).min().map(|t| (*h, t))
            })
            .collect();
        RunReport {
            stop: self.stop.unwrap_or(StopReason::TimeLimit),
            end_us: self.now_us,
            events: self.events,
            messages: self.messages,
            dropped: self.dropped,
            height,
            commit_times_us,
            violations: self.violations.clone(),
            reconfigs: self.reconfigs.clone(),
            requests: self.requests.values().cloned().collect(),
            ops: self.ops,
            snapshots: self.slots.values().map(|s| s.node.snapshot()).collect(),
        }
    }
}

/// Builds and runs a simulation in one call.
pub fn run(cfg: SimConfig) -> Result<(RunReport, Simulation), SimError> {
    let mut sim = Simulation::new(cfg)?;
    let report = sim.run()?;
    Ok((report, sim))
}
