//! Seeded discrete-event simulation of a whole scenario in one thread.
//!
//! Links have a constant one-way latency and optional independent loss.
//! Ties in time are broken by scheduling order, so a run is a pure
//! function of the configuration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use mixfed_core::metrics::{digest, EmissionRecord, LinkEvent, ObservationLog};
use mixfed_core::node::{Action, Node, NodeConfig, NodeEvent, NodeStatus};
use mixfed_core::onion::PacketFormat;
use mixfed_core::seed::derive_seed;
use mixfed_core::{Nanos, NodeId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};

use crate::config::{ChurnAction, ChurnStep, ScenarioConfig};
use crate::world::{node_keys, LearningTask};

#[derive(Clone, Debug, Default)]
pub struct SimOptions {
    /// Give every node a learner and run the rounds.
    pub learn: bool,
    /// Keep per-emission ground truth (relay audits).
    pub trace: bool,
    /// Record the global observation log.
    pub observe: bool,
    /// Synthetic real messages per node per second (Poisson).
    pub background_hz: f64,
    /// Nodes that neither send nor receive synthetic messages.
    pub background_exclude: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent {
    pub t: Nanos,
    pub node: NodeId,
    pub event: NodeEvent,
}

#[derive(Clone, Debug)]
enum Kind {
    Emit(NodeId),
    Arrive { to: NodeId, frame: Vec<u8> },
    Heartbeat { to: NodeId, from: NodeId },
    Maintain(NodeId),
    Background(NodeId),
}

#[derive(Debug)]
struct Scheduled {
    t: Nanos,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Min-heap on (t, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

struct Slot {
    node: Node,
    alive: bool,
    processed: u64,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    opts: SimOptions,
    format: PacketFormat,
    node_config: NodeConfig,
    task: Option<LearningTask>,
    now: Nanos,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    slots: Vec<Slot>,
    rng: ChaCha20Rng,
    log: ObservationLog,
    emissions: Vec<EmissionRecord>,
    events: Vec<SimEvent>,
    churn: Vec<ChurnStep>,
    latency: Nanos,
    tick: Nanos,
    synthetic_tag: u32,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.now)
            .field("nodes", &self.slots.len())
            .finish_non_exhaustive()
    }
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, opts: SimOptions) -> anyhow::Result<Self> {
        cfg.validate()?;
        let format = PacketFormat::new(cfg.route.k_max)?;
        let task = if opts.learn {
            Some(LearningTask::build(cfg)?)
        } else {
            None
        };
        let seed = cfg.transport.seed;
        let mut sim = Simulation {
            cfg: cfg.clone(),
            format,
            node_config: cfg.node_config(),
            task,
            now: Nanos::ZERO,
            seq: 0,
            heap: BinaryHeap::new(),
            slots: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(derive_seed(seed, "links", 0)),
            log: ObservationLog::default(),
            emissions: Vec::new(),
            events: Vec::new(),
            churn: cfg.churn.clone(),
            latency: Nanos::from_secs_f64(cfg.transport.latency_s),
            tick: Nanos::from_secs_f64(cfg.transport.tick_s),
            synthetic_tag: u32::MAX,
            opts,
        };
        let ids: Vec<NodeId> = cfg.node_ids().collect();
        for &id in &ids {
            sim.spawn(id, &ids);
        }
        for &id in &ids {
            if let Some(s) = sim.slot_mut(id) {
                s.node.start(Nanos::ZERO);
            }
        }
        sim.drain_node_events();
        sim.apply_churn();
        Ok(sim)
    }

    fn spawn(&mut self, id: NodeId, peers: &[NodeId]) {
        let seed = self.cfg.transport.seed;
        let keys = node_keys(seed, id);
        let learner = self.task.as_ref().map(|t| t.setup(id));
        let mut node = Node::new(
            keys,
            format!("sim:{}", id.0),
            self.format,
            self.node_config,
            learner,
            derive_seed(seed, "node", u64::from(id.0)),
            self.now,
        );
        node.set_trace(self.opts.trace);
        for &p in peers {
            if p != id {
                let public = node_keys(seed, p).public();
                node.router_mut()
                    .view_mut()
                    .upsert(p, format!("sim:{}", p.0), public, self.now);
            }
        }
        let n = self.cfg.n_nodes as u64;
        let stagger = Nanos(self.tick.0 * (u64::from(id.0) % n) / n);
        let first_emit = node.next_emission();
        self.schedule(first_emit, Kind::Emit(id));
        self.schedule(self.now + stagger, Kind::Maintain(id));
        if self.opts.background_hz > 0.0 {
            let dt = self.background_gap();
            self.schedule(self.now + dt, Kind::Background(id));
        }
        debug_assert_eq!(self.slots.len(), id.0 as usize);
        self.slots.push(Slot {
            node,
            alive: true,
            processed: 0,
        });
    }

    fn background_gap(&mut self) -> Nanos {
        let exp = Exp::new(self.opts.background_hz).expect("positive rate");
        Nanos::from_secs_f64(exp.sample(&mut self.rng)).max(Nanos(1))
    }

    fn schedule(&mut self, t: Nanos, kind: Kind) {
        self.seq += 1;
        self.heap.push(Scheduled { t, seq: self.seq, kind });
    }

    fn slot_mut(&mut self, id: NodeId) -> Option<&mut Slot> {
        self.slots.get_mut(id.0 as usize).filter(|s| s.alive)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn format(&self) -> &PacketFormat {
        &self.format
    }

    pub fn task(&self) -> Option<&LearningTask> {
        self.task.as_ref()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.slots.get(id.0 as usize).map(|s| &s.node)
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.slots.get(id.0 as usize).is_some_and(|s| s.alive)
    }

    pub fn alive(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.slots.iter().filter(|s| s.alive).map(|s| s.node.id())
    }

    pub fn statuses(&self) -> Vec<(NodeStatus, bool)> {
        self.slots.iter().map(|s| (s.node.status(), s.alive)).collect()
    }

    /// Incoming packets peeled by `id` so far.
    pub fn processed(&self, id: NodeId) -> u64 {
        self.slots.get(id.0 as usize).map_or(0, |s| s.processed)
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn take_log(&mut self) -> ObservationLog {
        std::mem::take(&mut self.log)
    }

    /// Relayed items that are still waiting in some mixer.
    pub fn relays_in_flight(&self) -> u64 {
        self.slots
            .iter()
            .filter(|s| s.alive)
            .map(|s| {
                let m = s.node.mixer();
                m.queued().chain(m.outbox()).filter(|i| i.probe.is_some()).count() as u64
            })
            .sum()
    }

    pub fn take_emissions(&mut self) -> Vec<EmissionRecord> {
        std::mem::take(&mut self.emissions)
    }

    pub fn emissions(&self) -> &[EmissionRecord] {
        &self.emissions
    }

    pub fn take_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.events)
    }

    /// Every living learner has finished its rounds.
    pub fn learning_done(&self) -> bool {
        self.task.is_some() && self.slots.iter().filter(|s| s.alive).all(|s| s.node.finished())
    }

    /// Lowest epoch among living learners.
    pub fn min_epoch(&self) -> Option<u32> {
        self.slots.iter().filter(|s| s.alive).map(|s| s.node.epoch()).min()
    }

    pub fn send_payload(&mut self, from: NodeId, to: NodeId, body: Vec<u8>, tag: u32) -> anyhow::Result<u64> {
        let now = self.now;
        let slot = self
            .slot_mut(from)
            .ok_or_else(|| anyhow::anyhow!("node {} is not running", from.0))?;
        Ok(slot.node.send_payload(to, body, tag, now)?)
    }

    /// Stops a node abruptly; its queued frames are lost.
    pub fn kill(&mut self, id: NodeId) -> bool {
        match self.slot_mut(id) {
            Some(s) => {
                s.alive = false;
                true
            }
            None => false,
        }
    }

    /// Starts a fresh node that knows the currently running nodes,
    /// announces itself and begins training one epoch ahead.
    pub fn add_node(&mut self) -> NodeId {
        let id = NodeId(self.slots.len() as u32);
        let peers: Vec<NodeId> = self.alive().collect();
        let epoch = self.slots.iter().filter(|s| s.alive).map(|s| s.node.epoch()).max();
        self.spawn(id, &peers);
        let now = self.now;
        let slot = self.slots.last_mut().expect("just pushed");
        if let Some(e) = epoch {
            slot.node.set_epoch(e + 1);
        }
        // The joiner heard its peers at provisioning; they learn about it
        // from the join announcement.
        slot.node.announce_join();
        slot.node.start(now);
        self.drain_node_events();
        id
    }

    /// Pushes a new configuration to every running node.
    pub fn redeploy(&mut self, config: NodeConfig) -> usize {
        self.node_config = config;
        let mut applied = 0;
        for s in self.slots.iter_mut().filter(|s| s.alive) {
            if s.node.apply_config(config) {
                applied += 1;
            }
        }
        self.drain_node_events();
        applied
    }

    /// Processes the next event. Returns false once nothing is scheduled.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.heap.pop() else {
            return false;
        };
        self.now = self.now.max(ev.t);
        match ev.kind {
            Kind::Emit(id) => self.on_emit(id),
            Kind::Arrive { to, frame } => {
                let now = self.now;
                if let Some(s) = self.slot_mut(to) {
                    s.processed += 1;
                    s.node.on_frame(&frame, now);
                }
            }
            Kind::Heartbeat { to, from } => {
                let now = self.now;
                if let Some(s) = self.slot_mut(to) {
                    s.node.on_heartbeat(from, now);
                }
            }
            Kind::Maintain(id) => self.on_maintain(id),
            Kind::Background(id) => self.on_background(id),
        }
        self.drain_node_events();
        true
    }

    /// Runs until simulated time `t` (events at `t` included).
    pub fn run_until(&mut self, t: Nanos) {
        while self.heap.peek().is_some_and(|e| e.t <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Runs until `stop` holds (checked after every event) or `deadline`.
    /// Returns whether `stop` held.
    pub fn run_while(&mut self, deadline: Nanos, mut stop: impl FnMut(&mut Simulation) -> bool) -> bool {
        loop {
            if stop(self) {
                return true;
            }
            if !self.heap.peek().is_some_and(|e| e.t <= deadline) {
                self.now = self.now.max(deadline);
                return stop(self);
            }
            self.step();
        }
    }

    /// Runs the learning rounds (with scheduled churn) to completion or
    /// `transport.max_time_s`.
    pub fn run_learning(&mut self) -> bool {
        let deadline = Nanos::from_secs_f64(self.cfg.transport.max_time_s);
        self.run_while(deadline, |s| s.learning_done())
    }

    fn on_emit(&mut self, id: NodeId) {
        let now = self.now;
        let Some(slot) = self.slot_mut(id) else { return };
        let action = slot.node.emit(now);
        let next = slot.node.next_emission();
        self.schedule(next, Kind::Emit(id));
        if let Some(Action::Send { to, packet, record }) = action {
            if self.opts.trace {
                self.emissions.push(record);
            }
            let frame = packet.into_bytes();
            if self.opts.observe {
                self.log.push(LinkEvent {
                    t: now,
                    from: id,
                    to,
                    len: frame.len() as u32,
                    digest: digest(&frame),
                });
            }
            if self.cfg.transport.loss > 0.0 && self.rng.gen_bool(self.cfg.transport.loss) {
                return;
            }
            self.schedule(now + self.latency, Kind::Arrive { to, frame });
        }
    }

    fn on_maintain(&mut self, id: NodeId) {
        let now = self.now;
        let tick = self.tick;
        let Some(slot) = self.slot_mut(id) else { return };
        let actions = slot.node.maintain(now);
        self.schedule(now + tick, Kind::Maintain(id));
        for a in actions {
            if let Action::Heartbeat { to } = a {
                self.schedule(now + self.latency, Kind::Heartbeat { to, from: id });
            }
        }
    }

    fn on_background(&mut self, id: NodeId) {
        if !self.is_alive(id) || self.opts.background_exclude.contains(&id) {
            return;
        }
        let now = self.now;
        let candidates: Vec<NodeId> = self.slots[id.0 as usize]
            .node
            .router()
            .view()
            .active()
            .filter(|p| !self.opts.background_exclude.contains(p))
            .collect();
        if !candidates.is_empty() {
            let dest = candidates[self.rng.gen_range(0..candidates.len())];
            let mut body = vec![0u8; 64];
            self.rng.fill(&mut body[..]);
            let tag = self.synthetic_tag;
            let slot = &mut self.slots[id.0 as usize];
            let _ = slot.node.send_payload(dest, body, tag, now);
        }
        let dt = self.background_gap();
        self.schedule(now + dt, Kind::Background(id));
    }

    fn drain_node_events(&mut self) {
        let now = self.now;
        let mut round_finished = false;
        for s in &mut self.slots {
            for event in s.node.drain_events() {
                round_finished |= matches!(event, NodeEvent::Round(_));
                self.events.push(SimEvent {
                    t: now,
                    node: s.node.id(),
                    event,
                });
            }
        }
        if round_finished {
            self.apply_churn();
        }
    }

    /// Fires churn steps whose round has been reached: a step `at_round R`
    /// fires once every living learner has completed round `R - 1`.
    fn apply_churn(&mut self) {
        loop {
            let Some(min) = self.min_epoch() else { return };
            let Some(pos) = self.churn.iter().position(|c| c.at_round <= min + 1) else {
                return;
            };
            let step = self.churn.remove(pos);
            match step.action {
                ChurnAction::Kill => {
                    if let Some(id) = step.node_id {
                        self.kill(NodeId(id));
                    }
                }
                ChurnAction::Add => {
                    self.add_node();
                }
            }
        }
    }
}
