//! Message digests, per-receiver authentication tags, bundle verification,
//! the dispute rule, and the signature abstraction used by clients and for
//! replies.
//!
//! The protocol hash is SHA-256 everywhere: digests, HMAC tags, the
//! deterministic test signature scheme and key-unit derivation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::qkd::{KeyPool, KeyUnit, Phase, QkdError};
use crate::ring::NodeId;
use crate::wire::{Reader, Wire, WireError, Writer};

type HmacSha256 = Hmac<Sha256>;

pub const DIGEST_LEN: usize = 32;
pub const TAG_LEN: usize = 16;
pub const TAG_BITS: usize = TAG_LEN * 8;
pub const DIGEST_BITS: usize = DIGEST_LEN * 8;
/// Diagonal bits of the 128x256 Toeplitz matrix.
pub const TOEPLITZ_DIAGONALS: usize = TAG_BITS + DIGEST_BITS - 1;
/// Diagonals followed by the one-time pad.
pub const TOEPLITZ_KEY_BITS: usize = TOEPLITZ_DIAGONALS + TAG_BITS;
pub const DEFAULT_REFRESH_INTERVAL: u32 = 1024;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight hex characters, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }

    pub fn from_hex(s: &str) -> Result<Digest, hex::FromHexError> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl Wire for Digest {
    fn encode(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Digest(r.array()?))
    }
}

pub fn digest(canonical_bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(canonical_bytes).into())
}

/// Digest of the concatenation `a ‖ b`.
pub fn digest_pair(a: &Digest, b: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update(a.0);
    h.update(b.0);
    Digest(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagMode {
    #[default]
    ToeplitzIts,
    Hmac,
}

impl TagMode {
    fn tag(self) -> u8 {
        match self {
            TagMode::ToeplitzIts => 0,
            TagMode::Hmac => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TagMode::ToeplitzIts => "toeplitz",
            TagMode::Hmac => "hmac",
        }
    }
}

impl fmt::Display for TagMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag {
    pub bytes: [u8; TAG_LEN],
    pub mode: TagMode,
    pub key_serial: u64,
}

impl Wire for Tag {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.mode.tag()).u64(self.key_serial).raw(&self.bytes);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let mode = match r.u8()? {
            0 => TagMode::ToeplitzIts,
            1 => TagMode::Hmac,
            tag => return Err(WireError::InvalidTag { what: "tag mode", tag }),
        };
        let key_serial = r.u64()?;
        Ok(Tag { bytes: r.array()?, mode, key_serial })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("key unit has {0} bits, Toeplitz tags need {TOEPLITZ_KEY_BITS}")]
    KeyTooShort(usize),
    #[error("node {0} is not in the member list")]
    UnknownMember(NodeId),
    #[error("bundle carries no tag for {0}")]
    MissingTag(NodeId),
    #[error("unknown signer {0}")]
    UnknownClient(SignerId),
    #[error("malformed signature")]
    MalformedSignature,
    #[error("signature scheme {0:?} is not configured")]
    SchemeUnavailable(SchemeId),
    #[error("n={n} cannot tolerate f={f} faults")]
    InvalidFaultBound { n: usize, f: usize },
    #[error(transparent)]
    Key(#[from] QkdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn accepted(self) -> bool {
        self == Verdict::Accept
    }
}

/// Key bits packed into big-endian u64 words: bit `i` of the key is bit
/// `63 - i % 64` of word `i / 64`.
fn pack_bits(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks(8)
        .map(|c| {
            let mut w = [0u8; 8];
            w[..c.len()].copy_from_slice(c);
            u64::from_be_bytes(w)
        })
        .collect()
}

/// 64 key bits starting at bit `start`.
fn window(words: &[u64], start: usize) -> u64 {
    let (i, sh) = (start / 64, start % 64);
    let hi = words.get(i).copied().unwrap_or(0);
    if sh == 0 {
        return hi;
    }
    let lo = words.get(i + 1).copied().unwrap_or(0);
    (hi << sh) | (lo >> (64 - sh))
}

/// Tag = A·d XOR pad over GF(2), with `A[r][c] = s[r - c + 255]`.
///
/// Substituting `k = 255 - c`, row `r` is the parity of
/// `s[r + k] & d[255 - k]` over `k`, so each row is a 256-bit window of the
/// diagonal bits ANDed with the bit-reversed digest.
pub fn toeplitz_tag(key: &KeyUnit, d: &Digest) -> Result<Tag, AuthError> {
    if key.bit_len() < TOEPLITZ_KEY_BITS {
        return Err(AuthError::KeyTooShort(key.bit_len()));
    }
    let s = pack_bits(key.bytes());
    let mut rev = [0u64; 4];
    for (j, w) in rev.iter_mut().enumerate() {
        // bits k = 64j..64j+63 of the reversed digest are digest bits
        // 255-64j down to 192-64j, i.e. digest word 3-j bit-reversed.
        let src = u64::from_be_bytes(d.0[(3 - j) * 8..(4 - j) * 8].try_into().expect("8 bytes"));
        *w = src.reverse_bits();
    }
    let mut out = [0u8; TAG_LEN];
    for r in 0..TAG_BITS {
        let mut acc = 0u64;
        for (j, rw) in rev.iter().enumerate() {
            acc ^= window(&s, r + 64 * j) & rw;
        }
        let bit = (acc.count_ones() & 1) as u8 ^ key.bit(TOEPLITZ_DIAGONALS + r) as u8;
        out[r / 8] |= bit << (7 - r % 8);
    }
    Ok(Tag { bytes: out, mode: TagMode::ToeplitzIts, key_serial: key.serial })
}

pub fn hmac_tag(key: &KeyUnit, d: &Digest) -> Tag {
    let mut mac = HmacSha256::new_from_slice(key.bytes()).expect("HMAC accepts any key length");
    mac.update(&d.0);
    let full = mac.finalize().into_bytes();
    let mut bytes = [0u8; TAG_LEN];
    bytes.copy_from_slice(&full[..TAG_LEN]);
    Tag { bytes, mode: TagMode::Hmac, key_serial: key.serial }
}

pub fn compute_tag(mode: TagMode, key: &KeyUnit, d: &Digest) -> Result<Tag, AuthError> {
    match mode {
        TagMode::ToeplitzIts => toeplitz_tag(key, d),
        TagMode::Hmac => Ok(hmac_tag(key, d)),
    }
}

/// Per-sender tag generation state. Toeplitz tags draw a fresh unit per
/// tag; HMAC tags reuse a unit for `refresh_interval` tags per receiver.
#[derive(Debug, Clone)]
pub struct TagIssuer {
    mode: TagMode,
    refresh_interval: u32,
    current: BTreeMap<(NodeId, NodeId), (KeyUnit, u32)>,
}

impl TagIssuer {
    pub fn new(mode: TagMode) -> Self {
        Self::with_refresh_interval(mode, DEFAULT_REFRESH_INTERVAL)
    }

    pub fn with_refresh_interval(mode: TagMode, refresh_interval: u32) -> Self {
        Self { mode, refresh_interval: refresh_interval.max(1), current: BTreeMap::new() }
    }

    pub fn mode(&self) -> TagMode {
        self.mode
    }

    pub fn refresh_interval(&self) -> u32 {
        self.refresh_interval
    }

    pub fn tag_for(
        &mut self,
        pool: &mut KeyPool,
        sender: NodeId,
        receiver: NodeId,
        d: &Digest,
        phase: Phase,
    ) -> Result<Tag, AuthError> {
        match self.mode {
            TagMode::ToeplitzIts => toeplitz_tag(&pool.draw_key(sender, receiver, phase)?, d),
            TagMode::Hmac => {
                let slot = self.current.get_mut(&(sender, receiver));
                let reuse = matches!(&slot, Some((_, used)) if *used < self.refresh_interval);
                if !reuse {
                    let unit = pool.draw_key(sender, receiver, phase)?;
                    self.current.insert((sender, receiver), (unit, 0));
                }
                let (unit, used) = self.current.get_mut(&(sender, receiver)).expect("just set");
                *used += 1;
                Ok(hmac_tag(unit, d))
            }
        }
    }

    /// Forgets cached HMAC units for pairs touching `id`.
    pub fn forget(&mut self, id: NodeId) {
        self.current.retain(|(a, b), _| *a != id && *b != id);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthBundle {
    pub sender: NodeId,
    pub digest: Digest,
    pub tags: BTreeMap<NodeId, Tag>,
}

impl Wire for AuthBundle {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.sender).put(&self.digest).len(self.tags.len());
        for (id, t) in &self.tags {
            w.put(id).put(t);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let sender = r.get()?;
        let digest = r.get()?;
        let n = r.length()?;
        let mut tags = BTreeMap::new();
        for _ in 0..n {
            let id: NodeId = r.get()?;
            tags.insert(id, r.get()?);
        }
        Ok(AuthBundle { sender, digest, tags })
    }
}

/// One tag per member other than `sender`.
pub fn make_bundle(
    issuer: &mut TagIssuer,
    pool: &mut KeyPool,
    sender: NodeId,
    canonical_bytes: &[u8],
    members: &[NodeId],
    phase: Phase,
) -> Result<AuthBundle, AuthError> {
    if !members.contains(&sender) {
        return Err(AuthError::UnknownMember(sender));
    }
    let d = digest(canonical_bytes);
    let receivers: BTreeSet<NodeId> = members.iter().copied().filter(|m| *m != sender).collect();
    let mut tags = BTreeMap::new();
    for e in receivers {
        tags.insert(e, issuer.tag_for(pool, sender, e, &d, phase)?);
    }
    Ok(AuthBundle { sender, digest: d, tags })
}

/// Checks only the receiver's own tag. Other receivers' tags are opaque to
/// it since it does not hold their keys.
pub fn verify_bundle(
    receiver: NodeId,
    canonical_bytes: &[u8],
    bundle: &AuthBundle,
    pool: &mut KeyPool,
) -> Result<Verdict, AuthError> {
    let tag = bundle.tags.get(&receiver).ok_or(AuthError::MissingTag(receiver))?;
    let d = digest(canonical_bytes);
    if d != bundle.digest {
        return Ok(Verdict::Reject);
    }
    let key = pool.lookup(bundle.sender, receiver, tag.key_serial)?;
    let expected = compute_tag(tag.mode, &key, &d)?;
    Ok(if expected.bytes == tag.bytes { Verdict::Accept } else { Verdict::Reject })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisputeOutcome {
    RepudiationConfirmed,
    Insufficient,
}

pub fn dispute_threshold(n: usize, f: usize) -> usize {
    n.saturating_sub(f + 1)
}

pub fn adjudicate_dispute(dispute_count: usize, n: usize, f: usize) -> Result<DisputeOutcome, AuthError> {
    if n < 3 * f + 1 {
        return Err(AuthError::InvalidFaultBound { n, f });
    }
    Ok(if dispute_count >= dispute_threshold(n, f) {
        DisputeOutcome::RepudiationConfirmed
    } else {
        DisputeOutcome::Insufficient
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl Wire for ClientId {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ClientId(r.u64()?))
    }
}

/// Anything that signs: clients sign requests, nodes sign replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SignerId {
    Client(ClientId),
    Node(NodeId),
}

impl fmt::Display for SignerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignerId::Client(c) => c.fmt(f),
            SignerId::Node(n) => n.fmt(f),
        }
    }
}

impl Wire for SignerId {
    fn encode(&self, w: &mut Writer) {
        match self {
            SignerId::Client(c) => w.u8(0).put(c),
            SignerId::Node(n) => w.u8(1).put(n),
        };
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        match r.u8()? {
            0 => Ok(SignerId::Client(r.get()?)),
            1 => Ok(SignerId::Node(r.get()?)),
            tag => Err(WireError::InvalidTag { what: "signer", tag }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeId {
    #[default]
    TestDeterministic,
    PluggablePqc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSignature {
    pub scheme: SchemeId,
    pub bytes: Vec<u8>,
    pub signer: SignerId,
}

impl Wire for ClientSignature {
    fn encode(&self, w: &mut Writer) {
        let scheme = match self.scheme {
            SchemeId::TestDeterministic => 0,
            SchemeId::PluggablePqc => 1,
        };
        w.u8(scheme).bytes(&self.bytes).put(&self.signer);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let scheme = match r.u8()? {
            0 => SchemeId::TestDeterministic,
            1 => SchemeId::PluggablePqc,
            tag => return Err(WireError::InvalidTag { what: "signature scheme", tag }),
        };
        Ok(ClientSignature { scheme, bytes: r.bytes()?, signer: r.get()? })
    }
}

/// An externally supplied signature scheme (ML-DSA, SLH-DSA, ...).
pub trait PluggablePqc: Send + Sync + fmt::Debug {
    fn sign(&self, signer: SignerId, payload: &[u8]) -> Vec<u8>;
    fn verify(&self, signer: SignerId, payload: &[u8], signature: &[u8]) -> bool;
}

/// Genesis registry of signing identities.
///
/// The deterministic scheme is an HMAC under a per-identity secret derived
/// from the genesis seed and known to every node. It stands in for a real
/// signature so that simulations are reproducible; it is not one.
#[derive(Debug, Clone)]
pub struct KeyRegistry {
    seed: u64,
    registered: BTreeSet<SignerId>,
    scheme: SchemeId,
    pqc: Option<Arc<dyn PluggablePqc>>,
}

impl KeyRegistry {
    pub fn new(seed: u64) -> Self {
        Self { seed, registered: BTreeSet::new(), scheme: SchemeId::TestDeterministic, pqc: None }
    }

    pub fn with_pqc(mut self, scheme: Arc<dyn PluggablePqc>) -> Self {
        self.scheme = SchemeId::PluggablePqc;
        self.pqc = Some(scheme);
        self
    }

    pub fn register(&mut self, id: SignerId) {
        self.registered.insert(id);
    }

    pub fn is_registered(&self, id: SignerId) -> bool {
        self.registered.contains(&id)
    }

    pub fn scheme(&self) -> SchemeId {
        self.scheme
    }

    fn secret(&self, id: SignerId) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"qdbft/genesis-signing-secret/v1");
        h.update(self.seed.to_be_bytes());
        h.update(id.to_bytes());
        h.finalize().into()
    }

    fn mac(&self, id: SignerId, payload: &[u8]) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.secret(id)).expect("32-byte key");
        mac.update(payload);
        mac
    }

    pub fn sign(&self, id: SignerId, payload: &[u8]) -> Result<ClientSignature, AuthError> {
        if !self.is_registered(id) {
            return Err(AuthError::UnknownClient(id));
        }
        let bytes = match self.scheme {
            SchemeId::TestDeterministic => self.mac(id, payload).finalize().into_bytes().to_vec(),
            SchemeId::PluggablePqc => {
                self.pqc.as_ref().ok_or(AuthError::SchemeUnavailable(self.scheme))?.sign(id, payload)
            }
        };
        Ok(ClientSignature { scheme: self.scheme, bytes, signer: id })
    }

    /// Verifies `sig` as a signature by `id` over `payload`.
    pub fn verify(&self, id: SignerId, payload: &[u8], sig: &ClientSignature) -> Result<Verdict, AuthError> {
        if !self.is_registered(id) {
            return Err(AuthError::UnknownClient(id));
        }
        if sig.signer != id {
            return Ok(Verdict::Reject);
        }
        let ok = match sig.scheme {
            SchemeId::TestDeterministic => {
                if sig.bytes.len() != 32 {
                    return Err(AuthError::MalformedSignature);
                }
                self.mac(id, payload).verify_slice(&sig.bytes).is_ok()
            }
            SchemeId::PluggablePqc => {
                self.pqc.as_ref().ok_or(AuthError::SchemeUnavailable(sig.scheme))?.verify(id, payload, &sig.bytes)
            }
        };
        Ok(if ok { Verdict::Accept } else { Verdict::Reject })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qkd::{provision, DEFAULT_UNIT_BITS};

    fn ids(n: u64) -> Vec<NodeId> {
        (1..=n).map(NodeId).collect()
    }

    fn unit(fill: u8) -> KeyUnit {
        KeyUnit::from_bytes(0, vec![fill; 64])
    }

    #[test]
    fn empty_input_digest() {
        assert_eq!(digest(b"").to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn one_bit_changes_digest() {
        assert_ne!(digest(&[0b0000_0000]), digest(&[0b0000_0001]));
    }

    #[test]
    fn zero_key_gives_zero_tag() {
        let t = toeplitz_tag(&unit(0), &digest(b"x")).unwrap();
        assert_eq!(t.bytes, [0; TAG_LEN]);
    }

    #[test]
    fn zero_digest_gives_pad() {
        let mut pool = provision(&ids(2), 1, DEFAULT_UNIT_BITS, 3).unwrap();
        let key = pool.draw_key(NodeId(1), NodeId(2), Phase::New).unwrap();
        let t = toeplitz_tag(&key, &Digest::ZERO).unwrap();
        for r in 0..TAG_BITS {
            assert_eq!((t.bytes[r / 8] >> (7 - r % 8)) & 1 == 1, key.bit(TOEPLITZ_DIAGONALS + r));
        }
    }

    #[test]
    fn short_key_rejected() {
        let k = KeyUnit::from_bytes(0, vec![0; 63]);
        assert_eq!(toeplitz_tag(&k, &Digest::ZERO), Err(AuthError::KeyTooShort(504)));
    }

    #[test]
    fn hmac_keys_differ() {
        let d = digest(b"m");
        assert_eq!(hmac_tag(&unit(1), &d), hmac_tag(&unit(1), &d));
        assert_ne!(hmac_tag(&unit(1), &d).bytes, hmac_tag(&unit(2), &d).bytes);
    }

    #[test]
    fn bundle_round_trip_and_tamper() {
        let members = ids(4);
        let mut pools: Vec<KeyPool> = (0..4).map(|_| provision(&members, 8, DEFAULT_UNIT_BITS, 11).unwrap()).collect();
        let mut issuer = TagIssuer::new(TagMode::ToeplitzIts);
        let b = make_bundle(&mut issuer, &mut pools[0], NodeId(1), b"hello", &members, Phase::New).unwrap();
        assert_eq!(b.tags.len(), 3);
        for (i, id) in members.iter().enumerate().skip(1) {
            assert_eq!(verify_bundle(*id, b"hello", &b, &mut pools[i]).unwrap(), Verdict::Accept);
            assert_eq!(verify_bundle(*id, b"hellp", &b, &mut pools[i]).unwrap(), Verdict::Reject);
            let mut bad = b.clone();
            bad.tags.get_mut(id).unwrap().bytes[0] ^= 0x80;
            assert_eq!(verify_bundle(*id, b"hello", &bad, &mut pools[i]).unwrap(), Verdict::Reject);
        }
        assert_eq!(verify_bundle(NodeId(1), b"hello", &b, &mut pools[0]), Err(AuthError::MissingTag(NodeId(1))));
        assert_eq!(AuthBundle::from_bytes(&b.to_bytes()).unwrap(), b);
    }

    #[test]
    fn ten_members_consume_nine_units() {
        let members = ids(10);
        let mut pool = provision(&members, 4, DEFAULT_UNIT_BITS, 0).unwrap();
        pool.begin_round(1);
        let mut issuer = TagIssuer::new(TagMode::ToeplitzIts);
        let b = make_bundle(&mut issuer, &mut pool, NodeId(3), b"x", &members, Phase::Transmit).unwrap();
        pool.close_round(1);
        assert_eq!(b.tags.len(), 9);
        assert_eq!(pool.consumption_report(1).unwrap().count(Phase::Transmit), 9);
    }

    #[test]
    fn hmac_refresh_interval() {
        let members = ids(2);
        let run = |mode, interval| {
            let mut pool = provision(&members, 100, DEFAULT_UNIT_BITS, 0).unwrap();
            pool.begin_round(0);
            let mut issuer = TagIssuer::with_refresh_interval(mode, interval);
            for i in 0..10u8 {
                make_bundle(&mut issuer, &mut pool, NodeId(1), &[i], &members, Phase::Commit).unwrap();
            }
            pool.close_round(0);
            pool.consumption_report(0).unwrap().total()
        };
        assert_eq!(run(TagMode::Hmac, 1), run(TagMode::ToeplitzIts, 1));
        assert_eq!(run(TagMode::Hmac, 1), 10);
        assert_eq!(run(TagMode::Hmac, 4), 3);
    }

    #[test]
    fn unknown_sender_rejected() {
        let members = ids(3);
        let mut pool = provision(&members, 1, DEFAULT_UNIT_BITS, 0).unwrap();
        let mut issuer = TagIssuer::new(TagMode::Hmac);
        assert_eq!(
            make_bundle(&mut issuer, &mut pool, NodeId(9), b"", &members, Phase::New),
            Err(AuthError::UnknownMember(NodeId(9)))
        );
    }

    #[test]
    fn dispute_thresholds() {
        assert_eq!(adjudicate_dispute(2, 4, 1).unwrap(), DisputeOutcome::RepudiationConfirmed);
        assert_eq!(adjudicate_dispute(1, 4, 1).unwrap(), DisputeOutcome::Insufficient);
        assert_eq!(adjudicate_dispute(6, 10, 3).unwrap(), DisputeOutcome::RepudiationConfirmed);
        assert_eq!(adjudicate_dispute(5, 10, 3).unwrap(), DisputeOutcome::Insufficient);
        assert_eq!(adjudicate_dispute(9, 3, 1), Err(AuthError::InvalidFaultBound { n: 3, f: 1 }));
    }

    #[test]
    fn signatures() {
        let mut reg = KeyRegistry::new(5);
        let (a, b) = (SignerId::Client(ClientId(1)), SignerId::Client(ClientId(2)));
        reg.register(a);
        reg.register(b);
        let sig = reg.sign(a, b"op").unwrap();
        assert_eq!(reg.verify(a, b"op", &sig).unwrap(), Verdict::Accept);
        assert_eq!(reg.verify(a, b"oq", &sig).unwrap(), Verdict::Reject);
        assert_eq!(reg.verify(b, b"op", &sig).unwrap(), Verdict::Reject);
        let forged = ClientSignature { signer: b, ..sig.clone() };
        assert_eq!(reg.verify(b, b"op", &forged).unwrap(), Verdict::Reject);
        let stranger = SignerId::Client(ClientId(3));
        assert_eq!(reg.sign(stranger, b"op"), Err(AuthError::UnknownClient(stranger)));
        let short = ClientSignature { bytes: vec![1, 2], ..sig };
        assert_eq!(reg.verify(a, b"op", &short), Err(AuthError::MalformedSignature));
    }
}
