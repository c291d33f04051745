//! Peer view, route sampling, acknowledgments and churn handling.
//!
//! The [`Router`] is a sans-IO state machine. Packets it produces are pushed
//! into the node's [`Mixer`]; it never touches a socket. Liveness comes
//! from direct heartbeats that bypass the mixnet (they carry no learning
//! data and must not burn reply blocks).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::clock::Nanos;
use crate::id::NodeId;
use crate::mixer::{ItemKind, Mixer, QueueItem};
use crate::onion::{
    Hop, InnerPayload, NodeKeyPair, OnionError, OnionPacket, PacketFormat, PayloadKind, PeelResult, PublicKey,
    SurbId, SurbReplier, SurbTable,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverlayError {
    #[error("no route available to {0}")]
    NoRouteAvailable(NodeId),
    #[error("destination {0} is not an active peer")]
    InactiveDestination(NodeId),
    #[error(transparent)]
    Onion(#[from] OnionError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PeerState {
    Active,
    Inactive,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerInfo {
    pub address: String,
    pub public_key: PublicKey,
    pub last_seen: Nanos,
    pub state: PeerState,
}

/// This node's picture of the network. Never contains the node itself.
#[derive(Clone, Debug)]
pub struct TopologyView {
    self_id: NodeId,
    self_key: PublicKey,
    peers: BTreeMap<NodeId, PeerInfo>,
}

impl TopologyView {
    pub fn new(self_id: NodeId, self_key: PublicKey) -> Self {
        TopologyView {
            self_id,
            self_key,
            peers: BTreeMap::new(),
        }
    }

    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    /// Adds or re-activates a peer. Ignores the node's own id.
    pub fn upsert(&mut self, id: NodeId, address: String, public_key: PublicKey, now: Nanos) -> bool {
        if id == self.self_id {
            return false;
        }
        let fresh = !self.is_active(id);
        self.peers.insert(
            id,
            PeerInfo {
                address,
                public_key,
                last_seen: now,
                state: PeerState::Active,
            },
        );
        fresh
    }

    pub fn get(&self, id: NodeId) -> Option<&PeerInfo> {
        self.peers.get(&id)
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.peers.get(&id).is_some_and(|p| p.state == PeerState::Active)
    }

    pub fn active(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.peers
            .iter()
            .filter(|(_, p)| p.state == PeerState::Active)
            .map(|(id, _)| *id)
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    pub fn peers(&self) -> impl Iterator<Item = (NodeId, &PeerInfo)> {
        self.peers.iter().map(|(id, p)| (*id, p))
    }

    pub fn touch(&mut self, id: NodeId, now: Nanos) {
        if let Some(p) = self.peers.get_mut(&id) {
            p.last_seen = p.last_seen.max(now);
            p.state = PeerState::Active;
        }
    }

    pub fn mark_inactive(&mut self, id: NodeId) -> bool {
        match self.peers.get_mut(&id) {
            Some(p) if p.state == PeerState::Active => {
                p.state = PeerState::Inactive;
                true
            }
            _ => false,
        }
    }

    /// Hop descriptor for a peer or for this node itself.
    fn hop(&self, id: NodeId) -> Option<Hop> {
        if id == self.self_id {
            return Some(Hop {
                node: id,
                public: self.self_key,
            });
        }
        self.peers.get(&id).map(|p| Hop {
            node: id,
            public: p.public_key,
        })
    }
}

/// A sampled route: `k` hops in total, `k - 1` relays then the destination.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RouteSpec {
    pub relays: Vec<NodeId>,
    pub destination: NodeId,
    pub k: usize,
}

impl RouteSpec {
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.relays.iter().copied().chain(core::iter::once(self.destination))
    }

    pub fn touches(&self, id: NodeId) -> bool {
        self.nodes().any(|n| n == id)
    }

    fn hops(&self, view: &TopologyView) -> Option<Vec<Hop>> {
        self.nodes().map(|n| view.hop(n)).collect()
    }
}

/// Samples `k` uniformly on `1..=k_max` and `k - 1` distinct relays from the
/// active peers other than `dest` and `exclude`. Falls back to `k = 1` when
/// too few relays are available.
pub fn sample_route<R: Rng + ?Sized>(
    view: &TopologyView,
    dest: NodeId,
    exclude: &[NodeId],
    k_max: usize,
    rng: &mut R,
) -> RouteSpec {
    let k = rng.gen_range(1..=k_max.max(1));
    let candidates: Vec<NodeId> = view.active().filter(|n| *n != dest && !exclude.contains(n)).collect();
    if k - 1 > candidates.len() {
        return RouteSpec {
            relays: Vec::new(),
            destination: dest,
            k: 1,
        };
    }
    let relays = candidates.choose_multiple(rng, k - 1).copied().collect();
    RouteSpec {
        relays,
        destination: dest,
        k,
    }
}

/// Forward route from this node to an active peer.
pub fn select_path<R: Rng + ?Sized>(
    view: &TopologyView,
    dest: NodeId,
    k_max: usize,
    rng: &mut R,
) -> Result<RouteSpec, OverlayError> {
    if !view.is_active(dest) {
        return Err(OverlayError::InactiveDestination(dest));
    }
    Ok(sample_route(view, dest, &[], k_max, rng))
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OverlayConfig {
    pub k_max: usize,
    pub retry_timeout: Nanos,
    pub max_retries: u32,
    pub heartbeat_interval: Nanos,
    pub heartbeat_timeout: Nanos,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            k_max: 2,
            retry_timeout: Nanos::from_secs(10),
            max_retries: 3,
            heartbeat_interval: Nanos::from_secs(1),
            heartbeat_timeout: Nanos::from_secs(5),
        }
    }
}

pub type FragmentId = u64;

/// An unacknowledged fragment, kept for retransmission.
#[derive(Clone, Debug)]
pub struct PendingSend {
    pub fragment_id: FragmentId,
    pub body: Vec<u8>,
    pub route: RouteSpec,
    pub return_route: RouteSpec,
    pub surb_id: SurbId,
    pub first_sent_at: Nanos,
    pub sent_at: Nanos,
    pub retries: u32,
    /// Caller-defined label (the learning epoch), used for bulk cancel.
    pub tag: u32,
}

/// Join announcement carried inside the mixnet as a `JOIN` payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JoinMessage {
    pub node_id: NodeId,
    pub nonce: u64,
    pub public_key: PublicKey,
    pub address: String,
}

impl JoinMessage {
    /// `[id:4 BE][nonce:8 BE][public key:32][addr_len:1][addr]`
    pub fn encode(&self) -> Vec<u8> {
        let addr = self.address.as_bytes();
        let addr = &addr[..addr.len().min(255)];
        let mut out = Vec::with_capacity(45 + addr.len());
        out.extend_from_slice(&self.node_id.to_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.public_key.0);
        out.push(addr.len() as u8);
        out.extend_from_slice(addr);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let node_id = NodeId::read(bytes)?;
        let nonce = u64::from_be_bytes(bytes.get(4..12)?.try_into().ok()?);
        let public_key = PublicKey(bytes.get(12..44)?.try_into().ok()?);
        let len = *bytes.get(44)? as usize;
        let addr = bytes.get(45..45 + len)?;
        if bytes.len() != 45 + len {
            return None;
        }
        Some(JoinMessage {
            node_id,
            nonce,
            public_key,
            address: String::from(core::str::from_utf8(addr).ok()?),
        })
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct RouterStats {
    pub fragments_sent: u64,
    pub retransmissions: u64,
    pub abandoned: u64,
    pub acked: u64,
    pub relayed: u64,
    pub fragments_received: u64,
    pub acks_sent: u64,
    pub covers_received: u64,
    pub invalid: u64,
    pub joins_seen: u64,
    pub rtt_sum: Nanos,
}

/// What an incoming packet turned out to be.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Incoming {
    /// Peeled and queued for the next hop.
    Relayed,
    /// A fragment body for the learning layer; an ACK has been queued.
    Fragment(Vec<u8>),
    Acked { fragment_id: FragmentId, tag: u32, rtt: Nanos },
    Cover,
    Join(JoinMessage),
    /// Authentication failure, stale reply or malformed content.
    Dropped,
}

/// Side effects of a liveness sweep.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DepartureReport {
    pub departed: Vec<NodeId>,
    pub rerouted: Vec<FragmentId>,
    pub abandoned: Vec<FragmentId>,
}

const ACK_PREFIX: &[u8] = b"ACK";

/// Mixnet routing state of one node.
#[derive(Debug)]
pub struct Router {
    keys: NodeKeyPair,
    format: PacketFormat,
    config: OverlayConfig,
    view: TopologyView,
    pending: BTreeMap<FragmentId, PendingSend>,
    surbs: SurbTable,
    surb_owner: BTreeMap<SurbId, (FragmentId, Nanos)>,
    replier: SurbReplier,
    joins_seen: BTreeSet<(NodeId, u64)>,
    next_fragment: FragmentId,
    last_heartbeat: Option<Nanos>,
    stats: RouterStats,
}

impl Router {
    pub fn new(keys: NodeKeyPair, format: PacketFormat, config: OverlayConfig) -> Self {
        let view = TopologyView::new(keys.node_id(), keys.public());
        Router {
            keys,
            format,
            config,
            view,
            pending: BTreeMap::new(),
            surbs: SurbTable::default(),
            surb_owner: BTreeMap::new(),
            replier: SurbReplier::default(),
            joins_seen: BTreeSet::new(),
            next_fragment: 0,
            last_heartbeat: None,
            stats: RouterStats::default(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.keys.node_id()
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn format(&self) -> &PacketFormat {
        &self.format
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.config
    }

    /// Route length changes apply to routes sampled from now on; the packet
    /// geometry is fixed, so `k_max` is capped by it.
    pub fn set_config(&mut self, mut config: OverlayConfig) {
        config.k_max = config.k_max.clamp(1, self.format.max_hops() - 1);
        self.config = config;
    }

    pub fn view(&self) -> &TopologyView {
        &self.view
    }

    pub fn view_mut(&mut self) -> &mut TopologyView {
        &mut self.view
    }

    pub fn stats(&self) -> RouterStats {
        self.stats
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingSend> {
        self.pending.values()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn outstanding_surbs(&self) -> usize {
        self.surbs.len()
    }

    /// Everything kept per relayed packet. Always zero: relays are
    /// stateless, and this exists so tests can audit that claim.
    pub fn relay_state_entries(&self) -> usize {
        0
    }

    /// Sends `body` (an encoded fragment) to `dest` with a reply block over
    /// an independently sampled return path.
    pub fn send_fragment<R: RngCore + CryptoRng>(
        &mut self,
        body: Vec<u8>,
        dest: NodeId,
        tag: u32,
        now: Nanos,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> Result<FragmentId, OverlayError> {
        let id = self.next_fragment;
        let mut pending = PendingSend {
            fragment_id: id,
            body,
            route: RouteSpec {
                relays: Vec::new(),
                destination: dest,
                k: 1,
            },
            return_route: RouteSpec {
                relays: Vec::new(),
                destination: self.id(),
                k: 1,
            },
            surb_id: SurbId([0; 16]),
            first_sent_at: now,
            sent_at: now,
            retries: 0,
            tag,
        };
        self.transmit(&mut pending, now, mixer, rng)?;
        self.next_fragment += 1;
        self.pending.insert(id, pending);
        self.stats.fragments_sent += 1;
        Ok(id)
    }

    fn transmit<R: RngCore + CryptoRng>(
        &mut self,
        pending: &mut PendingSend,
        now: Nanos,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> Result<(), OverlayError> {
        let dest = pending.route.destination;
        let route = select_path(&self.view, dest, self.config.k_max, rng)?;
        let me = self.id();
        let return_route = sample_route(&self.view, me, &[dest], self.config.k_max, rng);
        let fwd_hops = route.hops(&self.view).ok_or(OverlayError::NoRouteAvailable(dest))?;
        let ret_hops = return_route.hops(&self.view).ok_or(OverlayError::NoRouteAvailable(me))?;
        let (surb, material) = self.format.build_surb(&ret_hops, rng)?;
        let payload = InnerPayload::new(PayloadKind::Fragment, pending.body.clone()).with_surb(surb);
        let packet = self.format.build_packet(&payload, &fwd_hops, rng)?;

        self.surb_owner.insert(material.surb_id, (pending.fragment_id, now));
        pending.surb_id = material.surb_id;
        self.surbs.insert(material);
        pending.route = route;
        pending.return_route = return_route;
        pending.sent_at = now;
        mixer.enqueue(QueueItem::new(ItemKind::Real, packet, fwd_hops[0].node));
        Ok(())
    }

    /// A cover packet to a uniformly random active peer over a fresh path;
    /// `None` when the node has no peers.
    pub fn make_cover<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Option<QueueItem> {
        let peers: Vec<NodeId> = self.view.active().collect();
        let dest = *peers.choose(rng)?;
        let route = sample_route(&self.view, dest, &[], self.config.k_max, rng);
        let hops = route.hops(&self.view)?;
        let payload = InnerPayload::new(PayloadKind::Cover, Vec::new());
        let packet = self.format.build_packet(&payload, &hops, rng).ok()?;
        Some(QueueItem::new(ItemKind::Cover, packet, hops[0].node))
    }

    /// Peels one layer and acts on it. `probe` is an instrumentation label
    /// copied onto a relayed item; pass `None` outside audits.
    pub fn handle_incoming<R: RngCore + CryptoRng>(
        &mut self,
        packet: &OnionPacket,
        now: Nanos,
        probe: Option<u64>,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> Incoming {
        match self.format.peel(packet, &self.keys) {
            PeelResult::Forward { next_hop, packet } => {
                self.stats.relayed += 1;
                let mut item = QueueItem::new(ItemKind::Relay, packet, next_hop);
                item.probe = probe;
                mixer.enqueue(item);
                Incoming::Relayed
            }
            PeelResult::Deliver(inner) => self.deliver(inner, now, mixer, rng),
            PeelResult::SurbReply { surb_id, body } => self.reply(surb_id, &body, now),
            PeelResult::Invalid => {
                self.stats.invalid += 1;
                Incoming::Dropped
            }
        }
    }

    fn deliver<R: RngCore + CryptoRng>(
        &mut self,
        inner: InnerPayload,
        now: Nanos,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> Incoming {
        match inner.kind {
            PayloadKind::Fragment => {
                self.stats.fragments_received += 1;
                if let Some(surb) = &inner.surb {
                    let mut ack = Vec::from(ACK_PREFIX);
                    ack.extend_from_slice(&surb.surb_id.0);
                    if let Ok((first_hop, packet)) = self.replier.apply(&self.format, surb, &ack, rng) {
                        self.stats.acks_sent += 1;
                        mixer.enqueue(QueueItem::new(ItemKind::SurbReply, packet, first_hop));
                    }
                }
                Incoming::Fragment(inner.body)
            }
            PayloadKind::Cover => {
                self.stats.covers_received += 1;
                Incoming::Cover
            }
            PayloadKind::Join => match JoinMessage::decode(&inner.body) {
                Some(msg) => {
                    if self.handle_join(&msg, now, mixer, rng) {
                        Incoming::Join(msg)
                    } else {
                        Incoming::Dropped
                    }
                }
                None => Incoming::Dropped,
            },
            // Acknowledgments only ever travel on reply blocks.
            PayloadKind::Ack => Incoming::Dropped,
        }
    }

    fn reply(&mut self, surb_id: SurbId, body: &[u8], now: Nanos) -> Incoming {
        let Ok(ack) = self.surbs.unwrap(&self.format, &surb_id, body) else {
            self.stats.invalid += 1;
            return Incoming::Dropped;
        };
        let Some((fragment_id, sent_at)) = self.surb_owner.remove(&surb_id) else {
            return Incoming::Dropped;
        };
        if !ack.starts_with(ACK_PREFIX) {
            return Incoming::Dropped;
        }
        let Some(pending) = self.pending.remove(&fragment_id) else {
            return Incoming::Dropped;
        };
        self.forget_surbs(fragment_id);
        let rtt = now.saturating_sub(sent_at);
        self.stats.acked += 1;
        self.stats.rtt_sum += rtt;
        Incoming::Acked {
            fragment_id,
            tag: pending.tag,
            rtt,
        }
    }

    /// Drops reply-block material of every attempt of a fragment.
    fn forget_surbs(&mut self, fragment_id: FragmentId) {
        let stale: Vec<SurbId> = self
            .surb_owner
            .iter()
            .filter(|(_, (f, _))| *f == fragment_id)
            .map(|(s, _)| *s)
            .collect();
        for s in stale {
            self.surb_owner.remove(&s);
            self.surbs.remove(&s);
        }
    }

    fn abandon(&mut self, fragment_id: FragmentId) {
        if self.pending.remove(&fragment_id).is_some() {
            self.forget_surbs(fragment_id);
            self.stats.abandoned += 1;
        }
    }

    /// Re-sends over a fresh route with a fresh reply block, or abandons
    /// once `max_retries` is exhausted or the destination is gone.
    fn resend<R: RngCore + CryptoRng>(
        &mut self,
        fragment_id: FragmentId,
        now: Nanos,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> bool {
        let Some(mut pending) = self.pending.remove(&fragment_id) else {
            return false;
        };
        if pending.retries >= self.config.max_retries || !self.view.is_active(pending.route.destination) {
            self.pending.insert(fragment_id, pending);
            self.abandon(fragment_id);
            return false;
        }
        pending.retries += 1;
        let ok = self.transmit(&mut pending, now, mixer, rng).is_ok();
        self.pending.insert(fragment_id, pending);
        if ok {
            self.stats.retransmissions += 1;
        } else {
            self.abandon(fragment_id);
        }
        ok
    }

    /// Retransmits every fragment whose ACK is overdue.
    pub fn retransmit_due<R: RngCore + CryptoRng>(&mut self, now: Nanos, mixer: &mut Mixer, rng: &mut R) -> usize {
        let due: Vec<FragmentId> = self
            .pending
            .values()
            .filter(|p| now.saturating_sub(p.sent_at) > self.config.retry_timeout)
            .map(|p| p.fragment_id)
            .collect();
        due.into_iter().filter(|f| self.resend(*f, now, mixer, rng)).count()
    }

    /// Drops pending fragments whose tag is below `min_tag` (stale epochs).
    pub fn cancel_below(&mut self, min_tag: u32) -> usize {
        let stale: Vec<FragmentId> = self
            .pending
            .values()
            .filter(|p| p.tag < min_tag)
            .map(|p| p.fragment_id)
            .collect();
        for f in &stale {
            if self.pending.remove(f).is_some() {
                self.forget_surbs(*f);
            }
        }
        stale.len()
    }

    /// Records a heartbeat. Heartbeats from unknown nodes are ignored: a
    /// node is only routable once its key arrived with a join.
    pub fn on_heartbeat(&mut self, from: NodeId, now: Nanos) {
        self.view.touch(from, now);
    }

    /// Whether a heartbeat round is due; marks it sent when it is.
    pub fn heartbeat_due(&mut self, now: Nanos) -> bool {
        match self.last_heartbeat {
            Some(t) if now.saturating_sub(t) < self.config.heartbeat_interval => false,
            _ => {
                self.last_heartbeat = Some(now);
                true
            }
        }
    }

    /// Marks silent peers inactive and reroutes in-flight fragments whose
    /// forward or return path used them.
    pub fn detect_departures<R: RngCore + CryptoRng>(
        &mut self,
        now: Nanos,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> DepartureReport {
        let timeout = self.config.heartbeat_timeout;
        let silent: Vec<NodeId> = self
            .view
            .peers()
            .filter(|(_, p)| p.state == PeerState::Active && now.saturating_sub(p.last_seen) > timeout)
            .map(|(id, _)| id)
            .collect();
        let mut report = DepartureReport::default();
        for id in &silent {
            self.view.mark_inactive(*id);
        }
        if silent.is_empty() {
            return report;
        }
        let affected: Vec<FragmentId> = self
            .pending
            .values()
            .filter(|p| silent.iter().any(|d| p.route.touches(*d) || p.return_route.relays.contains(d)))
            .map(|p| p.fragment_id)
            .collect();
        for f in affected {
            if self.resend(f, now, mixer, rng) {
                report.rerouted.push(f);
            } else {
                report.abandoned.push(f);
            }
        }
        report.departed = silent;
        report
    }

    /// Broadcasts this node's join to every active peer through the mixnet.
    pub fn announce_join<R: RngCore + CryptoRng>(&mut self, address: &str, mixer: &mut Mixer, rng: &mut R) -> usize {
        let msg = JoinMessage {
            node_id: self.id(),
            nonce: rng.next_u64(),
            public_key: self.public_key(),
            address: String::from(address),
        };
        self.joins_seen.insert((msg.node_id, msg.nonce));
        self.broadcast_join(&msg, &[], mixer, rng)
    }

    fn broadcast_join<R: RngCore + CryptoRng>(
        &mut self,
        msg: &JoinMessage,
        skip: &[NodeId],
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> usize {
        let body = msg.encode();
        let targets: Vec<NodeId> = self.view.active().filter(|p| !skip.contains(p)).collect();
        let mut sent = 0;
        for dest in targets {
            let route = sample_route(&self.view, dest, &[], self.config.k_max, rng);
            let Some(hops) = route.hops(&self.view) else { continue };
            let payload = InnerPayload::new(PayloadKind::Join, body.clone());
            if let Ok(packet) = self.format.build_packet(&payload, &hops, rng) {
                mixer.enqueue(QueueItem::new(ItemKind::Real, packet, hops[0].node));
                sent += 1;
            }
        }
        sent
    }

    /// Adds the joiner and re-broadcasts once. Returns false for duplicates.
    pub fn handle_join<R: RngCore + CryptoRng>(
        &mut self,
        msg: &JoinMessage,
        now: Nanos,
        mixer: &mut Mixer,
        rng: &mut R,
    ) -> bool {
        if msg.node_id == self.id() || !self.joins_seen.insert((msg.node_id, msg.nonce)) {
            return false;
        }
        self.stats.joins_seen += 1;
        self.view.upsert(msg.node_id, msg.address.clone(), msg.public_key, now);
        self.broadcast_join(msg, &[msg.node_id], mixer, rng);
        true
    }
}
