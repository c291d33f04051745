//! Fixed-length layered packets and single-use reply blocks.
//!
//! The construction follows Sphinx: one group element per packet that each
//! hop blinds before forwarding, a routing block that is shifted and
//! re-padded at every hop so its length never changes, and a per-hop MAC
//! over the header. Per-hop secrets come from an X25519-style
//! Diffie–Hellman on the Montgomery curve; routing and payload layers are
//! AES-128 in counter mode; integrity is HMAC-SHA256.
//!
//! Wire layout (always [`PACKET_LEN`] bytes):
//!
//! ```text
//! [version:1][alpha:32][routing: max_hops * 37][mac:32][payload]
//! ```
//!
//! `max_hops` is `K_max + 1` (relays plus the final recipient), so the
//! header length is fixed by `K_max` when a [`PacketFormat`] is created.
//! A routing slot is `[flag:1][next node id:4][next mac:32]`.
//!
//! The header MAC is checked at every hop. The payload carries an
//! end-to-end tag that the final hop (or, for replies, the originator)
//! checks: reply payloads are written by the replier after the reply block
//! was built, so no hop MAC can cover them.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use aes::Aes128;
use ctr::cipher::{KeyIvInit, StreamCipher};
use curve25519_dalek::montgomery::MontgomeryPoint;
use curve25519_dalek::scalar::Scalar;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

use crate::id::NodeId;

type Aes128Ctr = ctr::Ctr128BE<Aes128>;
type HmacSha256 = Hmac<Sha256>;

/// Total length of every packet on the wire.
pub const PACKET_LEN: usize = 1024;
/// Wire format version; the first byte of every packet.
pub const VERSION: u8 = 1;
pub const MAC_LEN: usize = 32;
pub const ALPHA_LEN: usize = 32;
pub const SLOT_LEN: usize = 1 + NodeId::ENCODED_LEN + MAC_LEN;
pub const SURB_ID_LEN: usize = 16;

const TAG_LEN: usize = 16;
const LEN_PREFIX: usize = 2;
const REPLY_SECRET_LEN: usize = 16;
const ALPHA_OFFSET: usize = 1;
const ROUTING_OFFSET: usize = ALPHA_OFFSET + ALPHA_LEN;

const SLOT_FORWARD: u8 = 0x01;
const SLOT_DELIVER: u8 = 0x02;
const SLOT_REPLY: u8 = 0x03;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum OnionError {
    #[error("path is empty")]
    EmptyPath,
    #[error("path has {len} hops, format supports at most {max}")]
    PathTooLong { len: usize, max: usize },
    #[error("payload of {len} bytes exceeds capacity of {capacity} bytes")]
    PayloadTooLarge { len: usize, capacity: usize },
    #[error("reply block already used")]
    SurbAlreadyUsed,
    #[error("unknown reply block id")]
    UnknownSurbId,
    #[error("authentication tag mismatch")]
    MacFailure,
    #[error("packet must be {PACKET_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("K_max = {0} leaves no room for a payload")]
    UnsupportedHops(usize),
    #[error("key agreement produced the identity element")]
    WeakKey,
}

/// Random token naming a reply block in the originator's pending table.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SurbId(pub [u8; SURB_ID_LEN]);

/// Montgomery-form public key.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; 32]);

/// Long-term key pair of a node.
#[derive(Clone)]
pub struct NodeKeyPair {
    node_id: NodeId,
    public: PublicKey,
    secret: Scalar,
}

impl core::fmt::Debug for NodeKeyPair {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("NodeKeyPair")
            .field("node_id", &self.node_id)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl NodeKeyPair {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(node_id: NodeId, rng: &mut R) -> Self {
        Self::from_secret(node_id, random_scalar(rng))
    }

    pub fn from_secret(node_id: NodeId, secret: Scalar) -> Self {
        let public = PublicKey(MontgomeryPoint::mul_base(&secret).to_bytes());
        NodeKeyPair {
            node_id,
            public,
            secret,
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    /// Diffie–Hellman with another node's public key.
    pub fn agree(&self, other: &PublicKey) -> [u8; 32] {
        (MontgomeryPoint(other.0) * self.secret).to_bytes()
    }

    fn agree_point(&self, alpha: &[u8; 32]) -> [u8; 32] {
        (MontgomeryPoint(*alpha) * self.secret).to_bytes()
    }
}

/// One hop of a path: where to send and whose key wraps the layer.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Hop {
    pub node: NodeId,
    pub public: PublicKey,
}

/// A packet exactly [`PACKET_LEN`] bytes long.
#[derive(Clone, PartialEq, Eq)]
pub struct OnionPacket(Vec<u8>);

impl core::fmt::Debug for OnionPacket {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "OnionPacket({} bytes)", self.0.len())
    }
}

impl OnionPacket {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, OnionError> {
        if bytes.len() != PACKET_LEN {
            return Err(OnionError::BadLength(bytes.len()));
        }
        Ok(OnionPacket(bytes.to_vec()))
    }

    pub fn from_vec(bytes: Vec<u8>) -> Result<Self, OnionError> {
        if bytes.len() != PACKET_LEN {
            return Err(OnionError::BadLength(bytes.len()));
        }
        Ok(OnionPacket(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PayloadKind {
    Fragment = 1,
    Ack = 2,
    Cover = 3,
    Join = 4,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => PayloadKind::Fragment,
            2 => PayloadKind::Ack,
            3 => PayloadKind::Cover,
            4 => PayloadKind::Join,
            _ => return None,
        })
    }
}

/// Innermost plaintext, visible only after the final peel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InnerPayload {
    pub kind: PayloadKind,
    pub body: Vec<u8>,
    pub surb: Option<Surb>,
}

impl InnerPayload {
    pub fn new(kind: PayloadKind, body: Vec<u8>) -> Self {
        InnerPayload {
            kind,
            body,
            surb: None,
        }
    }

    pub fn with_surb(mut self, surb: Surb) -> Self {
        self.surb = Some(surb);
        self
    }

    /// `[kind:1][has_surb:1][surb?][body_len:2 BE][body]`
    pub fn encode(&self, format: &PacketFormat) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.body.len() + format.surb_len());
        out.push(self.kind as u8);
        match &self.surb {
            Some(surb) => {
                out.push(1);
                surb.encode_into(&mut out);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.body.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8], format: &PacketFormat) -> Result<Self, OnionError> {
        let malformed = OnionError::Malformed("inner payload");
        let kind = PayloadKind::from_byte(*bytes.first().ok_or(malformed)?).ok_or(malformed)?;
        let mut pos = 2;
        let surb = match bytes.get(1) {
            Some(0) => None,
            Some(1) => {
                let end = pos + format.surb_len();
                let surb = Surb::decode(bytes.get(pos..end).ok_or(malformed)?, format)?;
                pos = end;
                Some(surb)
            }
            _ => return Err(malformed),
        };
        let len_bytes: [u8; 2] = bytes
            .get(pos..pos + 2)
            .ok_or(malformed)?
            .try_into()
            .map_err(|_| malformed)?;
        let len = u16::from_be_bytes(len_bytes) as usize;
        pos += 2;
        let body = bytes.get(pos..pos + len).ok_or(malformed)?.to_vec();
        if pos + len != bytes.len() {
            return Err(malformed);
        }
        Ok(InnerPayload { kind, body, surb })
    }
}

/// Outcome of removing one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PeelResult {
    /// Send `packet` to `next_hop`; nothing else about the path is exposed.
    Forward { next_hop: NodeId, packet: OnionPacket },
    /// This node is the final recipient.
    Deliver(InnerPayload),
    /// A reply travelling back along one of this node's reply blocks. The
    /// body is still wrapped; unwrap it with the stored key material.
    SurbReply { surb_id: SurbId, body: Vec<u8> },
    /// Failed authentication or malformed; drop silently.
    Invalid,
}

/// Single-use reply block. Attached to a forward packet so the recipient
/// can answer without learning who sent it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Surb {
    pub surb_id: SurbId,
    pub first_hop: NodeId,
    /// Pre-encrypted header: alpha, routing block and header MAC.
    header: Vec<u8>,
    reply_secret: [u8; REPLY_SECRET_LEN],
}

impl Surb {
    /// Reply blocks are always single-use.
    pub const ONE_TIME: bool = true;

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.surb_id.0);
        out.extend_from_slice(&self.first_hop.to_bytes());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.reply_secret);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8], format: &PacketFormat) -> Result<Self, OnionError> {
        if bytes.len() != format.surb_len() {
            return Err(OnionError::Malformed("reply block"));
        }
        let mut surb_id = [0u8; SURB_ID_LEN];
        surb_id.copy_from_slice(&bytes[..SURB_ID_LEN]);
        let first_hop = NodeId::read(&bytes[SURB_ID_LEN..]).ok_or(OnionError::Malformed("reply block"))?;
        let header_start = SURB_ID_LEN + NodeId::ENCODED_LEN;
        let header_end = header_start + format.header_len() + MAC_LEN;
        let mut reply_secret = [0u8; REPLY_SECRET_LEN];
        reply_secret.copy_from_slice(&bytes[header_end..]);
        Ok(Surb {
            surb_id: SurbId(surb_id),
            first_hop,
            header: bytes[header_start..header_end].to_vec(),
            reply_secret,
        })
    }
}

/// What the originator keeps to read a reply. Never leaves the originator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurbKeyMaterial {
    pub surb_id: SurbId,
    /// Payload keystream keys of every return hop, the originator included:
    /// each peel adds a layer to a reply body rather than removing one.
    payload_keys: Vec<[u8; 16]>,
    reply_secret: [u8; REPLY_SECRET_LEN],
}

#[derive(Clone)]
struct HopKeys {
    routing: [u8; 16],
    mac: [u8; 32],
    payload: [u8; 16],
    tag: [u8; 32],
}

struct BuiltHeader {
    /// `[alpha][routing][mac]`
    bytes: Vec<u8>,
    keys: Vec<HopKeys>,
}

/// Packet geometry for a given maximum route length.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PacketFormat {
    max_hops: usize,
}

impl PacketFormat {
    /// Geometry for routes of up to `k_max` relays plus the recipient.
    pub fn new(k_max: usize) -> Result<Self, OnionError> {
        let format = PacketFormat { max_hops: k_max + 1 };
        if k_max == 0 || format.header_len() + MAC_LEN + 1 + TAG_LEN + LEN_PREFIX >= PACKET_LEN {
            return Err(OnionError::UnsupportedHops(k_max));
        }
        Ok(format)
    }

    pub fn max_hops(&self) -> usize {
        self.max_hops
    }

    pub fn routing_len(&self) -> usize {
        self.max_hops * SLOT_LEN
    }

    /// `H`: alpha plus routing block.
    pub fn header_len(&self) -> usize {
        ALPHA_LEN + self.routing_len()
    }

    fn mac_offset(&self) -> usize {
        ROUTING_OFFSET + self.routing_len()
    }

    fn payload_offset(&self) -> usize {
        self.mac_offset() + MAC_LEN
    }

    pub fn payload_len(&self) -> usize {
        PACKET_LEN - 1 - self.header_len() - MAC_LEN
    }

    /// Largest encoded [`InnerPayload`] (or reply body) that fits.
    pub fn capacity(&self) -> usize {
        self.payload_len() - TAG_LEN - LEN_PREFIX
    }

    pub fn surb_len(&self) -> usize {
        SURB_ID_LEN + NodeId::ENCODED_LEN + self.header_len() + MAC_LEN + REPLY_SECRET_LEN
    }

    /// Largest body of an [`InnerPayload`] carrying a reply block.
    pub fn max_body_with_surb(&self) -> usize {
        self.capacity().saturating_sub(4 + self.surb_len())
    }

    /// Wraps `payload` for `path`; the last entry is the recipient.
    pub fn build_packet<R: RngCore + CryptoRng + ?Sized>(
        &self,
        payload: &InnerPayload,
        path: &[Hop],
        rng: &mut R,
    ) -> Result<OnionPacket, OnionError> {
        let inner = payload.encode(self);
        if inner.len() > self.capacity() {
            return Err(OnionError::PayloadTooLarge {
                len: inner.len(),
                capacity: self.capacity(),
            });
        }
        let mut final_slot = [0u8; 1];
        final_slot[0] = SLOT_DELIVER;
        let header = self.build_header(path, &final_slot, rng)?;
        let last = header.keys.last().expect("non-empty path");

        let mut body = self.framed_plaintext(&inner, rng);
        let tag = hmac_parts(&last.tag, &[&body[TAG_LEN..]]);
        body[..TAG_LEN].copy_from_slice(&tag[..TAG_LEN]);
        for keys in header.keys.iter().rev() {
            keystream_xor(&keys.payload, &mut body);
        }
        Ok(self.assemble(&header.bytes, &body))
    }

    /// Removes the layer addressed to `keys`.
    pub fn peel(&self, packet: &OnionPacket, keys: &NodeKeyPair) -> PeelResult {
        let bytes = packet.as_bytes();
        if bytes.len() != PACKET_LEN || bytes[0] != VERSION {
            return PeelResult::Invalid;
        }
        let mut alpha = [0u8; ALPHA_LEN];
        alpha.copy_from_slice(&bytes[ALPHA_OFFSET..ROUTING_OFFSET]);
        let routing = &bytes[ROUTING_OFFSET..self.mac_offset()];
        let mac = &bytes[self.mac_offset()..self.payload_offset()];

        let shared = keys.agree_point(&alpha);
        if shared == [0u8; 32] {
            return PeelResult::Invalid;
        }
        let hop = derive_hop_keys(&shared);
        let mut verifier = HmacSha256::new_from_slice(&hop.mac).expect("hmac accepts any key length");
        verifier.update(&[VERSION]);
        verifier.update(&alpha);
        verifier.update(routing);
        if verifier.verify_slice(mac).is_err() {
            return PeelResult::Invalid;
        }

        let mut shifted = vec![0u8; self.routing_len() + SLOT_LEN];
        shifted[..self.routing_len()].copy_from_slice(routing);
        keystream_xor(&hop.routing, &mut shifted);
        let mut payload = bytes[self.payload_offset()..].to_vec();
        keystream_xor(&hop.payload, &mut payload);

        match shifted[0] {
            SLOT_FORWARD => {
                let Some(next_hop) = NodeId::read(&shifted[1..]) else {
                    return PeelResult::Invalid;
                };
                let next_mac = &shifted[1 + NodeId::ENCODED_LEN..SLOT_LEN];
                let blind = blinding_factor(&alpha, &shared);
                let next_alpha = (MontgomeryPoint(alpha) * blind).to_bytes();
                let mut out = Vec::with_capacity(PACKET_LEN);
                out.push(VERSION);
                out.extend_from_slice(&next_alpha);
                out.extend_from_slice(&shifted[SLOT_LEN..]);
                out.extend_from_slice(next_mac);
                out.extend_from_slice(&payload);
                PeelResult::Forward {
                    next_hop,
                    packet: OnionPacket(out),
                }
            }
            SLOT_DELIVER => {
                let tag = hmac_parts(&hop.tag, &[&payload[TAG_LEN..]]);
                if !ct_eq(&tag[..TAG_LEN], &payload[..TAG_LEN]) {
                    return PeelResult::Invalid;
                }
                match unframe(&payload).and_then(|inner| InnerPayload::decode(inner, self)) {
                    Ok(inner) => PeelResult::Deliver(inner),
                    Err(_) => PeelResult::Invalid,
                }
            }
            SLOT_REPLY => {
                let mut id = [0u8; SURB_ID_LEN];
                id.copy_from_slice(&shifted[1..1 + SURB_ID_LEN]);
                PeelResult::SurbReply {
                    surb_id: SurbId(id),
                    body: payload,
                }
            }
            _ => PeelResult::Invalid,
        }
    }

    /// Builds a reply block whose path ends at the originator.
    pub fn build_surb<R: RngCore + CryptoRng + ?Sized>(
        &self,
        return_path: &[Hop],
        rng: &mut R,
    ) -> Result<(Surb, SurbKeyMaterial), OnionError> {
        let mut id = [0u8; SURB_ID_LEN];
        rng.fill_bytes(&mut id);
        let mut final_slot = [0u8; 1 + SURB_ID_LEN];
        final_slot[0] = SLOT_REPLY;
        final_slot[1..].copy_from_slice(&id);
        let header = self.build_header(return_path, &final_slot, rng)?;
        let mut reply_secret = [0u8; REPLY_SECRET_LEN];
        rng.fill_bytes(&mut reply_secret);

        let payload_keys = header.keys.iter().map(|k| k.payload).collect();
        let surb = Surb {
            surb_id: SurbId(id),
            first_hop: return_path[0].node,
            header: header.bytes,
            reply_secret,
        };
        let material = SurbKeyMaterial {
            surb_id: SurbId(id),
            payload_keys,
            reply_secret,
        };
        Ok((surb, material))
    }

    /// Wraps `ack_body` in the layers of `surb`. Single use is enforced by
    /// [`SurbReplier`]; this function alone does not track usage.
    pub fn apply_surb<R: RngCore + CryptoRng + ?Sized>(
        &self,
        surb: &Surb,
        ack_body: &[u8],
        rng: &mut R,
    ) -> Result<(NodeId, OnionPacket), OnionError> {
        if ack_body.len() > self.capacity() {
            return Err(OnionError::PayloadTooLarge {
                len: ack_body.len(),
                capacity: self.capacity(),
            });
        }
        if surb.header.len() != self.header_len() + MAC_LEN {
            return Err(OnionError::Malformed("reply block"));
        }
        let (enc_key, mac_key) = reply_keys(&surb.reply_secret);
        let mut body = self.framed_plaintext(ack_body, rng);
        let tag = hmac_parts(&mac_key, &[&body[TAG_LEN..]]);
        body[..TAG_LEN].copy_from_slice(&tag[..TAG_LEN]);
        keystream_xor(&enc_key, &mut body);
        Ok((surb.first_hop, self.assemble(&surb.header, &body)))
    }

    fn framed_plaintext<R: RngCore + ?Sized>(&self, inner: &[u8], rng: &mut R) -> Vec<u8> {
        let mut body = vec![0u8; self.payload_len()];
        body[TAG_LEN..TAG_LEN + LEN_PREFIX].copy_from_slice(&(inner.len() as u16).to_be_bytes());
        let start = TAG_LEN + LEN_PREFIX;
        body[start..start + inner.len()].copy_from_slice(inner);
        rng.fill_bytes(&mut body[start + inner.len()..]);
        body
    }

    fn assemble(&self, header: &[u8], payload: &[u8]) -> OnionPacket {
        let mut out = Vec::with_capacity(PACKET_LEN);
        out.push(VERSION);
        out.extend_from_slice(header);
        out.extend_from_slice(payload);
        debug_assert_eq!(out.len(), PACKET_LEN);
        OnionPacket(out)
    }

    fn build_header<R: RngCore + CryptoRng + ?Sized>(
        &self,
        path: &[Hop],
        final_slot: &[u8],
        rng: &mut R,
    ) -> Result<BuiltHeader, OnionError> {
        let hops = path.len();
        if hops == 0 {
            return Err(OnionError::EmptyPath);
        }
        if hops > self.max_hops {
            return Err(OnionError::PathTooLong {
                len: hops,
                max: self.max_hops,
            });
        }
        let r = self.max_hops;

        let mut acc = random_scalar(rng);
        let mut alphas = Vec::with_capacity(hops);
        let mut keys = Vec::with_capacity(hops);
        for hop in path {
            let alpha = MontgomeryPoint::mul_base(&acc).to_bytes();
            let shared = (MontgomeryPoint(hop.public.0) * acc).to_bytes();
            if shared == [0u8; 32] {
                return Err(OnionError::WeakKey);
            }
            acc *= blinding_factor(&alpha, &shared);
            keys.push(derive_hop_keys(&shared));
            alphas.push(alpha);
        }

        let stream_len = (r + 1) * SLOT_LEN;
        let mut filler: Vec<u8> = Vec::with_capacity((hops - 1) * SLOT_LEN);
        for k in &keys[..hops - 1] {
            filler.extend_from_slice(&[0u8; SLOT_LEN]);
            let stream = keystream(&k.routing, stream_len);
            let offset = stream_len - filler.len();
            xor_in_place(&mut filler, &stream[offset..]);
        }

        let mut routing = vec![0u8; r * SLOT_LEN];
        let plain_len = (r - hops + 1) * SLOT_LEN;
        routing[..final_slot.len()].copy_from_slice(final_slot);
        rng.fill_bytes(&mut routing[final_slot.len()..plain_len]);
        keystream_xor(&keys[hops - 1].routing, &mut routing[..plain_len]);
        routing[plain_len..].copy_from_slice(&filler);
        let mut mac = hmac_parts(&keys[hops - 1].mac, &[&[VERSION], &alphas[hops - 1], &routing]);

        for i in (0..hops - 1).rev() {
            let mut next = vec![0u8; r * SLOT_LEN];
            next[0] = SLOT_FORWARD;
            next[1..1 + NodeId::ENCODED_LEN].copy_from_slice(&path[i + 1].node.to_bytes());
            next[1 + NodeId::ENCODED_LEN..SLOT_LEN].copy_from_slice(&mac);
            next[SLOT_LEN..].copy_from_slice(&routing[..(r - 1) * SLOT_LEN]);
            keystream_xor(&keys[i].routing, &mut next);
            routing = next;
            mac = hmac_parts(&keys[i].mac, &[&[VERSION], &alphas[i], &routing]);
        }

        let mut bytes = Vec::with_capacity(self.header_len() + MAC_LEN);
        bytes.extend_from_slice(&alphas[0]);
        bytes.extend_from_slice(&routing);
        bytes.extend_from_slice(&mac);
        Ok(BuiltHeader { bytes, keys })
    }
}

/// Recovers the reply body from a [`PeelResult::SurbReply`].
pub fn unwrap_surb_reply(
    format: &PacketFormat,
    body: &[u8],
    material: &SurbKeyMaterial,
) -> Result<Vec<u8>, OnionError> {
    if body.len() != format.payload_len() {
        return Err(OnionError::Malformed("reply payload"));
    }
    let mut plain = body.to_vec();
    for key in &material.payload_keys {
        keystream_xor(key, &mut plain);
    }
    let (enc_key, mac_key) = reply_keys(&material.reply_secret);
    keystream_xor(&enc_key, &mut plain);
    let tag = hmac_parts(&mac_key, &[&plain[TAG_LEN..]]);
    if !ct_eq(&tag[..TAG_LEN], &plain[..TAG_LEN]) {
        return Err(OnionError::MacFailure);
    }
    unframe(&plain).map(<[u8]>::to_vec)
}

/// Originator-side table of outstanding reply blocks.
#[derive(Debug, Default, Clone)]
pub struct SurbTable {
    pending: BTreeMap<SurbId, SurbKeyMaterial>,
}

impl SurbTable {
    pub fn insert(&mut self, material: SurbKeyMaterial) {
        self.pending.insert(material.surb_id, material);
    }

    /// Unwraps a reply and forgets the key material. A failed tag leaves the
    /// entry in place so a forged reply cannot cancel a genuine one.
    pub fn unwrap(&mut self, format: &PacketFormat, surb_id: &SurbId, body: &[u8]) -> Result<Vec<u8>, OnionError> {
        let material = self.pending.get(surb_id).ok_or(OnionError::UnknownSurbId)?;
        let plain = unwrap_surb_reply(format, body, material)?;
        self.pending.remove(surb_id);
        Ok(plain)
    }

    /// Drops material on timeout or retransmission.
    pub fn remove(&mut self, surb_id: &SurbId) -> bool {
        self.pending.remove(surb_id).is_some()
    }

    pub fn contains(&self, surb_id: &SurbId) -> bool {
        self.pending.contains_key(surb_id)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SurbId> {
        self.pending.keys()
    }
}

/// Replier-side record of reply blocks already spent.
#[derive(Debug, Default, Clone)]
pub struct SurbReplier {
    used: BTreeSet<SurbId>,
}

impl SurbReplier {
    pub fn apply<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        format: &PacketFormat,
        surb: &Surb,
        ack_body: &[u8],
        rng: &mut R,
    ) -> Result<(NodeId, OnionPacket), OnionError> {
        if self.used.contains(&surb.surb_id) {
            return Err(OnionError::SurbAlreadyUsed);
        }
        let out = format.apply_surb(surb, ack_body, rng)?;
        self.used.insert(surb.surb_id);
        Ok(out)
    }

    pub fn used_count(&self) -> usize {
        self.used.len()
    }
}

fn unframe(plain: &[u8]) -> Result<&[u8], OnionError> {
    let len = u16::from_be_bytes([plain[TAG_LEN], plain[TAG_LEN + 1]]) as usize;
    let start = TAG_LEN + LEN_PREFIX;
    plain.get(start..start + len).ok_or(OnionError::Malformed("payload length"))
}

fn random_scalar<R: RngCore + ?Sized>(rng: &mut R) -> Scalar {
    let mut wide = [0u8; 64];
    rng.fill_bytes(&mut wide);
    Scalar::from_bytes_mod_order_wide(&wide)
}

fn labelled_hash(label: &[u8], shared: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"mixfed/");
    h.update(label);
    h.update(shared);
    h.finalize().into()
}

fn derive_hop_keys(shared: &[u8; 32]) -> HopKeys {
    let mut routing = [0u8; 16];
    routing.copy_from_slice(&labelled_hash(b"routing", shared)[..16]);
    let mut payload = [0u8; 16];
    payload.copy_from_slice(&labelled_hash(b"payload", shared)[..16]);
    HopKeys {
        routing,
        mac: labelled_hash(b"mac", shared),
        payload,
        tag: labelled_hash(b"tag", shared),
    }
}

fn reply_keys(secret: &[u8; REPLY_SECRET_LEN]) -> ([u8; 16], [u8; 32]) {
    let mut padded = [0u8; 32];
    padded[..REPLY_SECRET_LEN].copy_from_slice(secret);
    let mut enc = [0u8; 16];
    enc.copy_from_slice(&labelled_hash(b"reply-enc", &padded)[..16]);
    (enc, labelled_hash(b"reply-mac", &padded))
}

fn blinding_factor(alpha: &[u8; 32], shared: &[u8; 32]) -> Scalar {
    let mut h = Sha512::new();
    h.update(b"mixfed/blind");
    h.update(alpha);
    h.update(shared);
    let wide: [u8; 64] = h.finalize().into();
    Scalar::from_bytes_mod_order_wide(&wide)
}

fn keystream(key: &[u8; 16], len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    keystream_xor(key, &mut out);
    out
}

fn keystream_xor(key: &[u8; 16], data: &mut [u8]) {
    let mut cipher = Aes128Ctr::new(key.into(), &[0u8; 16].into());
    cipher.apply_keystream(data);
}

fn xor_in_place(dst: &mut [u8], src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

fn hmac_parts(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
