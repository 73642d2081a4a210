//! Inter-node message types and their canonical encodings.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::auth::{digest, AuthBundle, ClientId, ClientSignature, Digest};
use crate::ledger::{Block, BlockHeader, Request};
use crate::ring::{ConfigTable, NodeId};
use crate::wire::{Reader, Wire, WireError, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    New,
    Transmit,
    Commit,
    Reply,
    Checkpoint,
    Join,
    Agr,
    AgrC,
    Exit,
    ExitBroad,
    Lc,
    Unresp,
    Sur,
    PrimaryMissing,
    Dispute,
    // transport plumbing
    Request,
    Forward,
    SurAck,
    Welcome,
    SyncRequest,
    SyncResponse,
}

impl MessageKind {
    pub fn label(self) -> &'static str {
        match self {
            MessageKind::New => "NEW",
            MessageKind::Transmit => "TRANSMIT",
            MessageKind::Commit => "COMMIT",
            MessageKind::Reply => "REPLY",
            MessageKind::Checkpoint => "CHECKPOINT",
            MessageKind::Join => "JOIN",
            MessageKind::Agr => "AGR",
            MessageKind::AgrC => "AGR_C",
            MessageKind::Exit => "EXIT",
            MessageKind::ExitBroad => "EXIT_BROAD",
            MessageKind::Lc => "LC",
            MessageKind::Unresp => "UNRESP",
            MessageKind::Sur => "SUR",
            MessageKind::PrimaryMissing => "PRIMARY_MISSING",
            MessageKind::Dispute => "DISPUTE",
            MessageKind::Request => "REQUEST",
            MessageKind::Forward => "FORWARD",
            MessageKind::SurAck => "SUR_ACK",
            MessageKind::Welcome => "WELCOME",
            MessageKind::SyncRequest => "SYNC_REQUEST",
            MessageKind::SyncResponse => "SYNC_RESPONSE",
        }
    }

    /// Round messages must carry the receiver's exact table version.
    pub fn version_strict(self) -> bool {
        matches!(self, MessageKind::New | MessageKind::Transmit | MessageKind::Commit)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewMsg {
    pub height: u64,
    pub parent_hash: Digest,
    /// H32 of the parent hash, the ring target used for selection.
    pub ring_point: u32,
    pub proposer: NodeId,
    pub commit_time_ms: u64,
    pub batch_digest: Digest,
    pub decisions: Vec<bool>,
    pub requests: Vec<Request>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmitMsg {
    pub height: u64,
    pub table: Digest,
    pub new_digest: Digest,
    pub batch_digest: Digest,
    pub decisions: Vec<bool>,
    /// Digest of the block these decisions produce.
    pub block_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitMsg {
    pub height: u64,
    pub table: Digest,
    pub parent_hash: Digest,
    pub commit_time_ms: u64,
    pub merkle_root: Digest,
    pub block_digest: Digest,
    /// Attached only when re-finalizing under a newer table.
    pub block: Option<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMsg {
    pub height: u64,
    pub state_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinMsg {
    pub joiner: NodeId,
    pub timestamp_ms: u64,
    pub known_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgrMsg {
    pub joiner: NodeId,
    pub join_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WelcomeMsg {
    pub table: ConfigTable,
    pub tip_height: u64,
    pub tip_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitMsg {
    pub leaver: NodeId,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectMsg {
    pub subject: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeMsg {
    pub nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimaryMissingMsg {
    pub missing: NodeId,
    pub height: u64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisputeVerdict {
    /// The accused denies having authenticated the enclosed message.
    Deny,
    /// A receiver vouches that the enclosed bundle verified for it.
    Attest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisputeMsg {
    pub accused: NodeId,
    pub verdict: DisputeVerdict,
    /// Signed bytes of the disputed envelope.
    pub message: Vec<u8>,
    pub bundle: AuthBundle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncRequestMsg {
    pub from_height: u64,
    pub known_version: u64,
    pub want: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncResponseMsg {
    pub table: ConfigTable,
    pub tip_height: u64,
    /// `(header, approved_total)` for heights whose bodies were pruned.
    pub headers: Vec<(BlockHeader, u64)>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    New(NewMsg),
    Transmit(TransmitMsg),
    Commit(CommitMsg),
    Checkpoint(CheckpointMsg),
    Forward(Request),
    Join(JoinMsg),
    Agr(AgrMsg),
    AgrC(AgrMsg),
    Welcome(WelcomeMsg),
    Exit(ExitMsg),
    ExitBroad(SubjectMsg),
    Lc(SubjectMsg),
    Unresp(SubjectMsg),
    Sur(ProbeMsg),
    SurAck(ProbeMsg),
    PrimaryMissing(PrimaryMissingMsg),
    Dispute(DisputeMsg),
    SyncRequest(SyncRequestMsg),
    SyncResponse(SyncResponseMsg),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::New(_) => MessageKind::New,
            Body::Transmit(_) => MessageKind::Transmit,
            Body::Commit(_) => MessageKind::Commit,
            Body::Checkpoint(_) => MessageKind::Checkpoint,
            Body::Forward(_) => MessageKind::Forward,
            Body::Join(_) => MessageKind::Join,
            Body::Agr(_) => MessageKind::Agr,
            Body::AgrC(_) => MessageKind::AgrC,
            Body::Welcome(_) => MessageKind::Welcome,
            Body::Exit(_) => MessageKind::Exit,
            Body::ExitBroad(_) => MessageKind::ExitBroad,
            Body::Lc(_) => MessageKind::Lc,
            Body::Unresp(_) => MessageKind::Unresp,
            Body::Sur(_) => MessageKind::Sur,
            Body::SurAck(_) => MessageKind::SurAck,
            Body::PrimaryMissing(_) => MessageKind::PrimaryMissing,
            Body::Dispute(_) => MessageKind::Dispute,
            Body::SyncRequest(_) => MessageKind::SyncRequest,
            Body::SyncResponse(_) => MessageKind::SyncResponse,
        }
    }

    /// Height for round-scoped messages.
    pub fn height(&self) -> Option<u64> {
        match self {
            Body::New(m) => Some(m.height),
            Body::Transmit(m) => Some(m.height),
            Body::Commit(m) => Some(m.height),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Auth {
    None,
    Bundle(AuthBundle),
    Signature(ClientSignature),
}

#[derive(Debug)]
pub struct Envelope {
    pub sender: NodeId,
    pub table_version: u64,
    pub body: Body,
    pub auth: Auth,
    signed: OnceLock<Vec<u8>>,
}

impl Clone for Envelope {
    fn clone(&self) -> Self {
        Envelope::new(self.sender, self.table_version, self.body.clone(), self.auth.clone())
    }
}

impl PartialEq for Envelope {
    fn eq(&self, other: &Self) -> bool {
        self.sender == other.sender
            && self.table_version == other.table_version
            && self.body == other.body
            && self.auth == other.auth
    }
}

impl Eq for Envelope {}

impl Envelope {
    pub fn new(sender: NodeId, table_version: u64, body: Body, auth: Auth) -> Self {
        Envelope { sender, table_version, body, auth, signed: OnceLock::new() }
    }

    /// The authenticated bytes: sender, version and body, without `auth`.
    pub fn signed_bytes(&self) -> &[u8] {
        self.signed.get_or_init(|| signed_bytes(self.sender, self.table_version, &self.body))
    }

    /// Builds an envelope whose signed bytes were already computed.
    pub(crate) fn from_parts(sender: NodeId, table_version: u64, body: Body, auth: Auth, signed: Vec<u8>) -> Self {
        let env = Envelope::new(sender, table_version, body, auth);
        let _ = env.signed.set(signed);
        env
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn into_shared(self) -> Arc<Envelope> {
        Arc::new(self)
    }
}

pub fn signed_bytes(sender: NodeId, table_version: u64, body: &Body) -> Vec<u8> {
    let mut w = Writer::new();
    w.put(&sender).u64(table_version).put(body);
    w.finish()
}

/// Content digest of a NEW under a given table version.
pub fn new_digest(version: u64, m: &NewMsg) -> Digest {
    let mut w = Writer::new();
    w.u64(version).put(m);
    digest(&w.finish())
}

/// Digest of the ordered request digests `D(M)`.
pub fn batch_digest(requests: &[Request]) -> Digest {
    let mut w = Writer::with_capacity(4 + 32 * requests.len());
    w.len(requests.len());
    for r in requests {
        w.put(&r.digest());
    }
    digest(&w.finish())
}

/// Quorum key for TRANSMIT: every field except sender.
pub fn transmit_content(version: u64, m: &TransmitMsg) -> Digest {
    let mut w = Writer::new();
    w.u64(version).put(m);
    digest(&w.finish())
}

/// Quorum key for COMMIT: the block and the table it is committed under.
pub fn commit_content(version: u64, height: u64, table: &Digest, block_digest: &Digest) -> Digest {
    let mut w = Writer::new();
    w.u64(version).u64(height).put(table).put(block_digest);
    digest(&w.finish())
}

/// Node-signed reply to a client: decision bits for that client's requests
/// in one committed block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub node: NodeId,
    pub client: ClientId,
    pub height: u64,
    pub block_digest: Digest,
    pub entries: Vec<(Digest, bool)>,
    pub signature: ClientSignature,
}

impl Reply {
    pub fn signing_payload(
        node: NodeId,
        client: ClientId,
        height: u64,
        block_digest: &Digest,
        entries: &[(Digest, bool)],
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.put(&node).put(&client).u64(height).put(block_digest).len(entries.len());
        for (d, ok) in entries {
            w.put(d).bool(*ok);
        }
        w.finish()
    }

    pub fn payload(&self) -> Vec<u8> {
        Self::signing_payload(self.node, self.client, self.height, &self.block_digest, &self.entries)
    }
}

impl Wire for NewMsg {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height)
            .put(&self.parent_hash)
            .u32(self.ring_point)
            .put(&self.proposer)
            .u64(self.commit_time_ms)
            .put(&self.batch_digest)
            .seq(&self.decisions)
            .seq(&self.requests);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(NewMsg {
            height: r.u64()?,
            parent_hash: r.get()?,
            ring_point: r.u32()?,
            proposer: r.get()?,
            commit_time_ms: r.u64()?,
            batch_digest: r.get()?,
            decisions: r.seq()?,
            requests: r.seq()?,
        })
    }
}

impl Wire for TransmitMsg {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height)
            .put(&self.table)
            .put(&self.new_digest)
            .put(&self.batch_digest)
            .seq(&self.decisions)
            .put(&self.block_digest);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(TransmitMsg {
            height: r.u64()?,
            table: r.get()?,
            new_digest: r.get()?,
            batch_digest: r.get()?,
            decisions: r.seq()?,
            block_digest: r.get()?,
        })
    }
}

impl Wire for CommitMsg {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height)
            .put(&self.table)
            .put(&self.parent_hash)
            .u64(self.commit_time_ms)
            .put(&self.merkle_root)
            .put(&self.block_digest)
            .opt(self.block.as_ref());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(CommitMsg {
            height: r.u64()?,
            table: r.get()?,
            parent_hash: r.get()?,
            commit_time_ms: r.u64()?,
            merkle_root: r.get()?,
            block_digest: r.get()?,
            block: r.opt()?,
        })
    }
}

impl Wire for CheckpointMsg {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height).put(&self.state_digest);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(CheckpointMsg { height: r.u64()?, state_digest: r.get()? })
    }
}

impl Wire for JoinMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.joiner).u64(self.timestamp_ms).u64(self.known_version);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(JoinMsg { joiner: r.get()?, timestamp_ms: r.u64()?, known_version: r.u64()? })
    }
}

impl Wire for AgrMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.joiner).put(&self.join_digest);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(AgrMsg { joiner: r.get()?, join_digest: r.get()? })
    }
}

impl Wire for WelcomeMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.table).u64(self.tip_height).put(&self.tip_digest);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(WelcomeMsg { table: r.get()?, tip_height: r.u64()?, tip_digest: r.get()? })
    }
}

impl Wire for ExitMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.leaver).u64(self.timestamp_ms);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ExitMsg { leaver: r.get()?, timestamp_ms: r.u64()? })
    }
}

impl Wire for SubjectMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.subject);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(SubjectMsg { subject: r.get()? })
    }
}

impl Wire for ProbeMsg {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.nonce);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ProbeMsg { nonce: r.u64()? })
    }
}

impl Wire for PrimaryMissingMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.missing).u64(self.height).u64(self.timestamp_ms);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(PrimaryMissingMsg { missing: r.get()?, height: r.u64()?, timestamp_ms: r.u64()? })
    }
}

impl Wire for DisputeMsg {
    fn encode(&self, w: &mut Writer) {
        let verdict = match self.verdict {
            DisputeVerdict::Deny => 0,
            DisputeVerdict::Attest => 1,
        };
        w.put(&self.accused).u8(verdict).bytes(&self.message).put(&self.bundle);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let accused = r.get()?;
        let verdict = match r.u8()? {
            0 => DisputeVerdict::Deny,
            1 => DisputeVerdict::Attest,
            tag => return Err(WireError::InvalidTag { what: "dispute verdict", tag }),
        };
        Ok(DisputeMsg { accused, verdict, message: r.bytes()?, bundle: r.get()? })
    }
}

impl Wire for SyncRequestMsg {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.from_height).u64(self.known_version).opt(self.want.as_ref());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(SyncRequestMsg { from_height: r.u64()?, known_version: r.u64()?, want: r.opt()? })
    }
}

impl Wire for SyncResponseMsg {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.table).u64(self.tip_height).len(self.headers.len());
        for (h, total) in &self.headers {
            w.put(h).u64(*total);
        }
        w.seq(&self.blocks);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let table = r.get()?;
        let tip_height = r.u64()?;
        let n = r.length()?;
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            headers.push((r.get()?, r.u64()?));
        }
        Ok(SyncResponseMsg { table, tip_height, headers, blocks: r.seq()? })
    }
}

impl Wire for Body {
    fn encode(&self, w: &mut Writer) {
        match self {
            Body::New(m) => w.u8(0).put(m),
            Body::Transmit(m) => w.u8(1).put(m),
            Body::Commit(m) => w.u8(2).put(m),
            Body::Checkpoint(m) => w.u8(3).put(m),
            Body::Forward(m) => w.u8(4).put(m),
            Body::Join(m) => w.u8(5).put(m),
            Body::Agr(m) => w.u8(6).put(m),
            Body::AgrC(m) => w.u8(7).put(m),
            Body::Welcome(m) => w.u8(8).put(m),
            Body::Exit(m) => w.u8(9).put(m),
            Body::ExitBroad(m) => w.u8(10).put(m),
            Body::Lc(m) => w.u8(11).put(m),
            Body::Unresp(m) => w.u8(12).put(m),
            Body::Sur(m) => w.u8(13).put(m),
            Body::SurAck(m) => w.u8(14).put(m),
            Body::PrimaryMissing(m) => w.u8(15).put(m),
            Body::Dispute(m) => w.u8(16).put(m),
            Body::SyncRequest(m) => w.u8(17).put(m),
            Body::SyncResponse(m) => w.u8(18).put(m),
        };
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => Body::New(r.get()?),
            1 => Body::Transmit(r.get()?),
            2 => Body::Commit(r.get()?),
            3 => Body::Checkpoint(r.get()?),
            4 => Body::Forward(r.get()?),
            5 => Body::Join(r.get()?),
            6 => Body::Agr(r.get()?),
            7 => Body::AgrC(r.get()?),
            8 => Body::Welcome(r.get()?),
            9 => Body::Exit(r.get()?),
            10 => Body::ExitBroad(r.get()?),
            11 => Body::Lc(r.get()?),
            12 => Body::Unresp(r.get()?),
            13 => Body::Sur(r.get()?),
            14 => Body::SurAck(r.get()?),
            15 => Body::PrimaryMissing(r.get()?),
            16 => Body::Dispute(r.get()?),
            17 => Body::SyncRequest(r.get()?),
            18 => Body::SyncResponse(r.get()?),
            tag => return Err(WireError::InvalidTag { what: "message body", tag }),
        })
    }
}

impl Wire for Auth {
    fn encode(&self, w: &mut Writer) {
        match self {
            Auth::None => w.u8(0),
            Auth::Bundle(b) => w.u8(1).put(b),
            Auth::Signature(s) => w.u8(2).put(s),
        };
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            0 => Auth::None,
            1 => Auth::Bundle(r.get()?),
            2 => Auth::Signature(r.get()?),
            tag => return Err(WireError::InvalidTag { what: "auth", tag }),
        })
    }
}

impl Wire for Envelope {
    fn encode(&self, w: &mut Writer) {
        w.raw(self.signed_bytes()).put(&self.auth);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let sender = r.get()?;
        let table_version = r.u64()?;
        let body = r.get()?;
        Ok(Envelope::new(sender, table_version, body, r.get()?))
    }
}

impl Wire for Reply {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.node).put(&self.client).u64(self.height).put(&self.block_digest).len(self.entries.len());
        for (d, ok) in &self.entries {
            w.put(d).bool(*ok);
        }
        w.put(&self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let node = r.get()?;
        let client = r.get()?;
        let height = r.u64()?;
        let block_digest = r.get()?;
        let n = r.length()?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push((r.get()?, r.bool()?));
        }
        Ok(Reply { node, client, height, block_digest, entries, signature: r.get()? })
    }
}
