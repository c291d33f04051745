//! A complete node: learner, router and mixer behind one event interface.
//!
//! Transports drive a [`Node`] with three calls and carry out the
//! [`Action`]s it returns:
//!
//! * [`Node::on_frame`] for every mixnet packet received,
//! * [`Node::emit`] whenever [`Node::next_emission`] is reached,
//! * [`Node::maintain`] periodically (heartbeats, failure detection,
//!   retransmission, round deadlines).
//!
//! Heartbeats are delivered with [`Node::on_heartbeat`].

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::clock::Nanos;
use crate::id::NodeId;
use crate::learning::{
    evaluate, fragment_model, local_train, CoverageStats, Dataset, Evaluation, Fragment, FragmentBuffer, Mlp,
    ModelVector, RoundAccumulator,
};
use crate::metrics::{self, EmissionRecord};
use crate::mixer::{MixConfig, Mixer, MixerStats};
use crate::onion::{NodeKeyPair, OnionPacket, PacketFormat};
use crate::overlay::{Incoming, OverlayConfig, OverlayError, Router, RouterStats};

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LearnConfig {
    pub frag_bytes: usize,
    pub eta: f64,
    /// Local SGD steps per round.
    pub tau: usize,
    pub batch_size: usize,
    pub rounds: u32,
    pub wait_timeout: Nanos,
    /// Extra wait once the quorum holds, to let stragglers land.
    pub quorum_grace: Nanos,
    /// Share of coordinates that must reach the peer threshold.
    pub quorum_coords: f64,
    /// Share of expected peers each such coordinate needs.
    pub quorum_peers: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            frag_bytes: 512,
            eta: 0.1,
            tau: 20,
            batch_size: 32,
            rounds: 10,
            wait_timeout: Nanos::from_secs(15),
            quorum_grace: Nanos::from_secs(1),
            quorum_coords: 0.9,
            quorum_peers: 0.5,
        }
    }
}

/// Everything a redeploy may change. Applied only when `version` grows.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct NodeConfig {
    pub version: u64,
    pub mix: MixConfig,
    pub overlay: OverlayConfig,
    pub learn: LearnConfig,
}

/// Private training state of a node.
#[derive(Clone, Debug)]
pub struct LearnerSetup {
    pub model: Mlp,
    pub init: ModelVector,
    pub train: Dataset,
    pub test: Arc<Dataset>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct Learner {
    model: Mlp,
    w: ModelVector,
    train: Dataset,
    test: Arc<Dataset>,
    rng: ChaCha20Rng,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Trigger {
    /// Every coordinate heard from every expected peer.
    Complete,
    /// Quorum held for the grace period.
    Quorum,
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub node: NodeId,
    pub epoch: u32,
    pub started: Nanos,
    pub finished: Nanos,
    pub trigger: Trigger,
    pub expected_peers: usize,
    pub fragments_used: usize,
    pub local: Evaluation,
    pub aggregated: Evaluation,
    pub coverage: CoverageStats,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeEvent {
    Round(RoundReport),
    /// A fragment body arrived (digest of the body bytes).
    Delivered { digest: u64, at: Nanos },
    Acked { rtt: Nanos, tag: u32 },
    Departed(Vec<NodeId>),
    Joined(NodeId),
    ConfigApplied(u64),
    Abandoned(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    /// Put `packet` on the link to `to`. `record` is instrumentation.
    Send {
        to: NodeId,
        packet: OnionPacket,
        record: EmissionRecord,
    },
    Heartbeat { to: NodeId },
}

#[derive(Clone, Debug)]
enum Round {
    NotStarted,
    Waiting {
        epoch: u32,
        started: Nanos,
        local: ModelVector,
        local_eval: Evaluation,
        acc: RoundAccumulator,
        used: usize,
        expected: BTreeSet<NodeId>,
        quorum_since: Option<Nanos>,
    },
    Finished,
}

/// Point-in-time status for monitoring.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStatus {
    pub node_id: NodeId,
    pub epoch: u32,
    pub config_version: u64,
    pub queue_len: usize,
    pub outbox_len: usize,
    pub active_peers: usize,
    pub pending_fragments: usize,
    pub mixer: MixerStats,
    pub router: RouterStats,
    pub last_round: Option<RoundReport>,
    pub finished: bool,
}

pub struct Node {
    id: NodeId,
    address: String,
    router: Router,
    mixer: Mixer,
    rng: ChaCha20Rng,
    learner: Option<Learner>,
    learn: LearnConfig,
    round: Round,
    epoch: u32,
    buffer: FragmentBuffer,
    events: Vec<NodeEvent>,
    version: u64,
    trace: bool,
    last_round: Option<RoundReport>,
}

impl core::fmt::Debug for Node {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id)
            .field("epoch", &self.epoch)
            .field("version", &self.version)
            .finish_non_exhaustive()
    }
}

impl Node {
    /// `seed` feeds the node's routing/crypto RNG and mixer; the learner
    /// carries its own seed so routing randomness never perturbs training.
    pub fn new(
        keys: NodeKeyPair,
        address: String,
        format: PacketFormat,
        config: NodeConfig,
        learner: Option<LearnerSetup>,
        seed: u64,
        now: Nanos,
    ) -> Self {
        let id = keys.node_id();
        let mut router = Router::new(keys, format, config.overlay);
        router.set_config(config.overlay);
        let mixer = Mixer::new(config.mix, seed ^ 0x006d_6978_6572, now);
        Node {
            id,
            address,
            router,
            mixer,
            rng: ChaCha20Rng::seed_from_u64(seed),
            learner: learner.map(|l| Learner {
                model: l.model,
                w: l.init,
                train: l.train,
                test: l.test,
                rng: ChaCha20Rng::seed_from_u64(l.seed),
            }),
            learn: config.learn,
            round: Round::NotStarted,
            epoch: 0,
            buffer: FragmentBuffer::default(),
            events: Vec::new(),
            version: config.version,
            trace: false,
            last_round: None,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut Router {
        &mut self.router
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn config_version(&self) -> u64 {
        self.version
    }

    pub fn model(&self) -> Option<&ModelVector> {
        self.learner.as_ref().map(|l| &l.w)
    }

    pub fn finished(&self) -> bool {
        matches!(self.round, Round::Finished)
    }

    /// Tag relayed items with the digest of the packet they came from.
    pub fn set_trace(&mut self, on: bool) {
        self.trace = on;
    }

    /// First epoch this node will train (joiners start mid-run).
    pub fn set_epoch(&mut self, epoch: u32) {
        if matches!(self.round, Round::NotStarted) {
            self.epoch = epoch;
        }
    }

    pub fn drain_events(&mut self) -> Vec<NodeEvent> {
        core::mem::take(&mut self.events)
    }

    pub fn next_emission(&self) -> Nanos {
        self.mixer.deadline()
    }

    pub fn status(&self) -> NodeStatus {
        NodeStatus {
            node_id: self.id,
            epoch: self.epoch,
            config_version: self.version,
            queue_len: self.mixer.queue_len(),
            outbox_len: self.mixer.outbox_len(),
            active_peers: self.router.view().active_count(),
            pending_fragments: self.router.pending_len(),
            mixer: self.mixer.stats(),
            router: self.router.stats(),
            last_round: self.last_round.clone(),
            finished: self.finished(),
        }
    }

    /// Applies a newer configuration in place; older or equal versions are
    /// ignored. Packet geometry cannot change, so `k_max` is capped by it.
    pub fn apply_config(&mut self, config: NodeConfig) -> bool {
        if config.version <= self.version {
            return false;
        }
        self.version = config.version;
        self.mixer.set_config(config.mix);
        self.router.set_config(config.overlay);
        self.learn = config.learn;
        self.events.push(NodeEvent::ConfigApplied(config.version));
        true
    }

    /// Announces this node to its provisioned peers.
    pub fn announce_join(&mut self) -> usize {
        let address = self.address.clone();
        self.router.announce_join(&address, &mut self.mixer, &mut self.rng)
    }

    /// Sends an application payload to `dest` (used by synthetic
    /// workloads; learning rounds send their own fragments).
    pub fn send_payload(&mut self, dest: NodeId, body: Vec<u8>, tag: u32, now: Nanos) -> Result<u64, OverlayError> {
        self.router.send_fragment(body, dest, tag, now, &mut self.mixer, &mut self.rng)
    }

    /// Starts the first learning round (no-op without a learner).
    pub fn start(&mut self, now: Nanos) {
        if self.learner.is_some() && matches!(self.round, Round::NotStarted) {
            if self.epoch >= self.learn.rounds {
                self.round = Round::Finished;
            } else {
                self.start_round(now);
            }
        }
    }

    pub fn on_heartbeat(&mut self, from: NodeId, now: Nanos) {
        self.router.on_heartbeat(from, now);
    }

    pub fn on_frame(&mut self, bytes: &[u8], now: Nanos) {
        let Ok(packet) = OnionPacket::from_bytes(bytes) else {
            return;
        };
        let probe = self.trace.then(|| metrics::digest(bytes));
        match self
            .router
            .handle_incoming(&packet, now, probe, &mut self.mixer, &mut self.rng)
        {
            Incoming::Fragment(body) => {
                self.events.push(NodeEvent::Delivered {
                    digest: metrics::digest(&body),
                    at: now,
                });
                if let Ok(f) = Fragment::decode(&body) {
                    self.accept_fragment(f, now);
                }
            }
            Incoming::Acked { rtt, tag, .. } => self.events.push(NodeEvent::Acked { rtt, tag }),
            Incoming::Join(msg) => self.events.push(NodeEvent::Joined(msg.node_id)),
            Incoming::Relayed | Incoming::Cover | Incoming::Dropped => {}
        }
    }

    /// Sends the next outbox item if its deadline has passed.
    pub fn emit(&mut self, now: Nanos) -> Option<Action> {
        let router = &self.router;
        let rng = &mut self.rng;
        let e = self.mixer.next_emission(now, &mut || router.make_cover(rng))?;
        let record = EmissionRecord {
            t: now,
            node: self.id,
            kind: e.item.kind,
            occupancy: e.occupancy,
            batch: e.batch,
            queued_index: e.queued_index,
            emitted_index: e.emitted_index,
            probe: e.item.probe,
        };
        Some(Action::Send {
            to: e.item.first_hop,
            packet: e.item.packet,
            record,
        })
    }

    /// Heartbeats, failure detection, retransmissions and round deadlines.
    pub fn maintain(&mut self, now: Nanos) -> Vec<Action> {
        let mut out = Vec::new();
        if self.router.heartbeat_due(now) {
            out.extend(self.router.view().peers().map(|(to, _)| Action::Heartbeat { to }));
        }
        let report = self.router.detect_departures(now, &mut self.mixer, &mut self.rng);
        if !report.departed.is_empty() {
            self.events.push(NodeEvent::Departed(report.departed));
        }
        let before = self.router.stats().abandoned;
        self.router.retransmit_due(now, &mut self.mixer, &mut self.rng);
        let abandoned = self.router.stats().abandoned - before + report.abandoned.len() as u64;
        if abandoned > 0 {
            self.events.push(NodeEvent::Abandoned(abandoned));
        }
        self.check_round(now);
        out
    }

    fn accept_fragment(&mut self, f: Fragment, now: Nanos) {
        if f.epoch < self.epoch || self.learner.is_none() {
            return;
        }
        let epoch = f.epoch;
        if !self.buffer.insert(f.clone()) {
            return;
        }
        if let Round::Waiting { epoch: e, acc, used, .. } = &mut self.round {
            if *e == epoch && acc.add(&f).is_ok() {
                *used += 1;
            }
        }
        self.check_round(now);
    }

    fn start_round(&mut self, now: Nanos) {
        let Some(learner) = self.learner.as_mut() else {
            return;
        };
        let epoch = self.epoch;
        let mut local = local_train(
            &learner.model,
            &learner.w,
            &learner.train,
            self.learn.tau,
            self.learn.eta,
            self.learn.batch_size,
            &mut learner.rng,
        );
        local.quantize_f32();
        let local_eval = evaluate(&learner.model, &local, &learner.test);

        let peers: Vec<NodeId> = self.router.view().active().collect();
        let fragments = fragment_model(&local, self.learn.frag_bytes, epoch);
        for f in &fragments {
            let body = f.encode();
            for &p in &peers {
                // A peer that vanished between listing and sending is
                // simply skipped; its absence shows up as lower coverage.
                let _ = self
                    .router
                    .send_fragment(body.clone(), p, epoch, now, &mut self.mixer, &mut self.rng);
            }
        }

        let mut acc = RoundAccumulator::new(local.len(), epoch);
        let mut used = 0;
        for f in self.buffer.get(epoch) {
            if acc.add(f).is_ok() {
                used += 1;
            }
        }
        self.round = Round::Waiting {
            epoch,
            started: now,
            local,
            local_eval,
            acc,
            used,
            expected: peers.into_iter().collect(),
            quorum_since: None,
        };
        self.check_round(now);
    }

    fn check_round(&mut self, now: Nanos) {
        let Round::Waiting {
            started,
            acc,
            expected,
            quorum_since,
            ..
        } = &mut self.round
        else {
            return;
        };
        let view = self.router.view();
        let peers = expected.iter().filter(|p| view.is_active(**p)).count();
        let trigger = if acc.complete(peers) {
            Some(Trigger::Complete)
        } else if acc.quorum(peers, self.learn.quorum_coords, self.learn.quorum_peers)
            && now.saturating_sub(*quorum_since.get_or_insert(now)) >= self.learn.quorum_grace
        {
            Some(Trigger::Quorum)
        } else if now.saturating_sub(*started) >= self.learn.wait_timeout {
            Some(Trigger::Timeout)
        } else {
            None
        };
        if let Some(trigger) = trigger {
            self.finish_round(now, trigger, peers);
        }
    }

    fn finish_round(&mut self, now: Nanos, trigger: Trigger, expected_peers: usize) {
        let Round::Waiting {
            epoch,
            started,
            local,
            local_eval,
            acc,
            used,
            ..
        } = core::mem::replace(&mut self.round, Round::NotStarted)
        else {
            return;
        };
        let learner = self.learner.as_mut().expect("rounds run only with a learner");
        let (aggregated, coverage) = acc.finish(&local);
        let aggregated_eval = evaluate(&learner.model, &aggregated, &learner.test);
        learner.w = aggregated;
        let report = RoundReport {
            node: self.id,
            epoch,
            started,
            finished: now,
            trigger,
            expected_peers,
            fragments_used: used,
            local: local_eval,
            aggregated: aggregated_eval,
            coverage,
        };
        self.last_round = Some(report.clone());
        self.events.push(NodeEvent::Round(report));

        self.epoch = epoch + 1;
        self.buffer.discard_before(self.epoch);
        self.router.cancel_below(epoch);
        if self.epoch >= self.learn.rounds {
            self.round = Round::Finished;
        } else {
            self.start_round(now);
        }
    }
}
