//! Real-time transport: every node is a thread with its own localhost
//! listener, and frames travel over TCP.
//!
//! Wire framing is a 4-byte big-endian length followed by the frame. A
//! frame is either an onion packet (first byte is the packet version) or a
//! heartbeat `[0xB0][node id]`.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mixfed_core::metrics::{digest, path_entropy, LinkEvent, ObservationLog};
use mixfed_core::node::{Action, Node, NodeConfig, NodeEvent, NodeStatus, RoundReport};
use mixfed_core::onion::{PacketFormat, PublicKey};
use mixfed_core::seed::derive_seed;
use mixfed_core::{Nanos, NodeId};

use crate::config::{ChurnAction, ScenarioConfig};
use crate::experiments::LearningRun;
use crate::live::{Command, EntropyRow, NodeStatusRow, RoundRow, Update};
use crate::sim::SimEvent;
use crate::world::{node_keys, LearningTask};

pub const HEARTBEAT_TAG: u8 = 0xB0;
const MAX_FRAME: usize = 64 * 1024;

pub fn write_frame(stream: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    let len = u32::try_from(frame.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too long"))?;
    stream.write_all(&len.to_be_bytes())?;
    stream.write_all(frame)
}

pub fn read_frame(stream: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "oversized frame"));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn heartbeat_frame(from: NodeId) -> Vec<u8> {
    let mut f = vec![HEARTBEAT_TAG];
    f.extend_from_slice(&from.to_bytes());
    f
}

enum Inbound {
    Frame(Vec<u8>),
    Config(NodeConfig),
}

enum Outbound {
    Event(Nanos, NodeId, NodeEvent),
    Status {
        status: Box<NodeStatus>,
        t: Nanos,
        processed: u64,
        log2_sum: f64,
        emissions: usize,
    },
}

struct Handle {
    addr: SocketAddr,
    public: PublicKey,
    stop: Arc<AtomicBool>,
    inbox: Sender<Inbound>,
    threads: Vec<JoinHandle<()>>,
    alive: bool,
    epoch: u32,
    finished: bool,
}

struct Shared {
    start: Instant,
    log: Mutex<ObservationLog>,
    outbound: Sender<Outbound>,
}

impl Shared {
    fn now(&self) -> Nanos {
        Nanos(self.start.elapsed().as_nanos() as u64)
    }
}

fn accept_loop(listener: TcpListener, inbox: Sender<Inbound>, stop: Arc<AtomicBool>) -> Vec<JoinHandle<()>> {
    let mut readers = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
                let inbox = inbox.clone();
                let stop = Arc::clone(&stop);
                readers.push(std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match read_frame(&mut stream) {
                            Ok(f) => {
                                if inbox.send(Inbound::Frame(f)).is_err() {
                                    return;
                                }
                            }
                            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                            Err(_) => return,
                        }
                    }
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(_) => std::thread::sleep(Duration::from_millis(5)),
        }
    }
    readers
}

struct Links {
    streams: HashMap<NodeId, TcpStream>,
}

impl Links {
    fn send(&mut self, node: &Node, to: NodeId, frame: &[u8]) -> bool {
        let stream = match self.streams.entry(to) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let Some(addr) = node
                    .router()
                    .view()
                    .get(to)
                    .and_then(|p| p.address.parse::<SocketAddr>().ok())
                else {
                    return false;
                };
                let Ok(s) = TcpStream::connect_timeout(&addr, Duration::from_millis(200)) else {
                    return false;
                };
                let _ = s.set_nodelay(true);
                e.insert(s)
            }
        };
        if write_frame(stream, frame).is_err() {
            self.streams.remove(&to);
            return false;
        }
        true
    }
}

fn node_loop(mut node: Node, shared: Arc<Shared>, inbox: Receiver<Inbound>, stop: Arc<AtomicBool>, tick: Nanos) {
    let id = node.id();
    let mut links = Links {
        streams: HashMap::new(),
    };
    let mut processed = 0u64;
    let (mut log2_sum, mut emissions) = (0.0f64, 0usize);
    let report_every = Nanos::from_secs(1);
    let mut next_tick = shared.now();
    let mut next_report = shared.now() + report_every;
    node.start(shared.now());
    while !stop.load(Ordering::Relaxed) {
        let now = shared.now();
        if now >= node.next_emission() {
            if let Some(Action::Send { to, packet, record }) = node.emit(now) {
                log2_sum += (record.occupancy.max(1) as f64).log2();
                emissions += 1;
                let frame = packet.into_bytes();
                shared.log.lock().expect("log lock").push(LinkEvent {
                    t: now,
                    from: id,
                    to,
                    len: frame.len() as u32,
                    digest: digest(&frame),
                });
                links.send(&node, to, &frame);
            }
        }
        if now >= next_tick {
            for a in node.maintain(now) {
                if let Action::Heartbeat { to } = a {
                    links.send(&node, to, &heartbeat_frame(id));
                }
            }
            next_tick = now + tick;
        }
        for e in node.drain_events() {
            let _ = shared.outbound.send(Outbound::Event(now, id, e));
        }
        if now >= next_report {
            let _ = shared.outbound.send(Outbound::Status {
                status: Box::new(node.status()),
                t: now,
                processed,
                log2_sum,
                emissions,
            });
            (log2_sum, emissions) = (0.0, 0);
            next_report = now + report_every;
        }
        let wake = node.next_emission().min(next_tick);
        let wait = Duration::from_nanos(wake.saturating_sub(shared.now()).0).min(Duration::from_millis(50));
        match inbox.recv_timeout(wait) {
            Ok(msg) => {
                let mut msg = Some(msg);
                while let Some(m) = msg.take() {
                    let now = shared.now();
                    match m {
                        Inbound::Frame(f) if f.first() == Some(&HEARTBEAT_TAG) => {
                            if let Some(from) = NodeId::read(&f[1..]) {
                                node.on_heartbeat(from, now);
                            }
                        }
                        Inbound::Frame(f) => {
                            processed += 1;
                            node.on_frame(&f, now);
                        }
                        Inbound::Config(c) => {
                            node.apply_config(c);
                        }
                    }
                    msg = inbox.try_recv().ok();
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

struct Cluster {
    cfg: ScenarioConfig,
    format: PacketFormat,
    node_config: NodeConfig,
    task: LearningTask,
    shared: Arc<Shared>,
    handles: BTreeMap<NodeId, Handle>,
}

impl Cluster {
    fn bind(&self, id: NodeId) -> io::Result<TcpListener> {
        let port = match self.cfg.transport.base_port {
            0 => 0,
            p => p + id.0 as u16,
        };
        TcpListener::bind(("127.0.0.1", port))
    }

    fn directory(&self) -> Vec<(NodeId, SocketAddr, PublicKey)> {
        self.handles
            .iter()
            .filter(|(_, h)| h.alive)
            .map(|(id, h)| (*id, h.addr, h.public))
            .collect()
    }

    fn spawn(
        &mut self,
        id: NodeId,
        listener: TcpListener,
        peers: &[(NodeId, SocketAddr, PublicKey)],
        epoch: Option<u32>,
    ) -> io::Result<()> {
        let seed = self.cfg.transport.seed;
        let keys = node_keys(seed, id);
        let addr = listener.local_addr()?;
        let public = keys.public();
        let now = self.shared.now();
        let mut node = Node::new(
            keys,
            addr.to_string(),
            self.format,
            self.node_config,
            Some(self.task.setup(id)),
            derive_seed(seed, "node", u64::from(id.0)),
            now,
        );
        for &(p, p_addr, p_key) in peers {
            if p != id {
                node.router_mut().view_mut().upsert(p, p_addr.to_string(), p_key, now);
            }
        }
        if let Some(e) = epoch {
            node.set_epoch(e);
            node.announce_join();
        }
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let accept = {
            let (tx, stop) = (tx.clone(), Arc::clone(&stop));
            std::thread::spawn(move || {
                for r in accept_loop(listener, tx, stop) {
                    let _ = r.join();
                }
            })
        };
        let worker = {
            let (shared, stop) = (Arc::clone(&self.shared), Arc::clone(&stop));
            let tick = Nanos::from_secs_f64(self.cfg.transport.tick_s);
            std::thread::spawn(move || node_loop(node, shared, rx, stop, tick))
        };
        self.handles.insert(
            id,
            Handle {
                addr,
                public,
                stop,
                inbox: tx,
                threads: vec![accept, worker],
                alive: true,
                epoch: epoch.unwrap_or(0),
                finished: false,
            },
        );
        Ok(())
    }

    fn kill(&mut self, id: NodeId) -> bool {
        match self.handles.get_mut(&id) {
            Some(h) if h.alive => {
                h.alive = false;
                h.stop.store(true, Ordering::Relaxed);
                true
            }
            _ => false,
        }
    }

    fn add(&mut self) -> io::Result<NodeId> {
        let id = NodeId(self.handles.keys().next_back().map_or(0, |k| k.0 + 1));
        let peers = self.directory();
        let epoch = self.handles.values().filter(|h| h.alive).map(|h| h.epoch).max();
        let listener = self.bind(id)?;
        self.spawn(id, listener, &peers, Some(epoch.map_or(0, |e| e + 1)))?;
        Ok(id)
    }

    fn shutdown(&mut self) {
        for h in self.handles.values() {
            h.stop.store(true, Ordering::Relaxed);
        }
        for h in self.handles.values_mut() {
            for t in h.threads.drain(..) {
                let _ = t.join();
            }
        }
    }
}

/// Runs the learning rounds over TCP with scheduled churn, applying
/// `commands` as they arrive and reporting through `sink`.
pub fn drive_tcp(
    cfg: &ScenarioConfig,
    commands: &Receiver<Command>,
    sink: &mut dyn FnMut(Update),
) -> anyhow::Result<LearningRun> {
    cfg.validate()?;
    let (out_tx, out_rx) = mpsc::channel();
    let mut cluster = Cluster {
        cfg: cfg.clone(),
        format: PacketFormat::new(cfg.route.k_max)?,
        node_config: cfg.node_config(),
        task: LearningTask::build(cfg)?,
        shared: Arc::new(Shared {
            start: Instant::now(),
            log: Mutex::new(ObservationLog::default()),
            outbound: out_tx,
        }),
        handles: BTreeMap::new(),
    };
    let ids: Vec<NodeId> = cfg.node_ids().collect();
    let mut listeners = Vec::new();
    let mut directory = Vec::new();
    for &id in &ids {
        let l = cluster.bind(id)?;
        directory.push((id, l.local_addr()?, node_keys(cfg.transport.seed, id).public()));
        listeners.push(l);
    }
    // Every address is known before any node starts talking.
    for (&id, l) in ids.iter().zip(listeners) {
        cluster.spawn(id, l, &directory, None)?;
    }
    let result = coordinate(&mut cluster, commands, sink, &out_rx);
    cluster.shutdown();
    let mut run = result?;
    run.log = std::mem::take(&mut *cluster.shared.log.lock().expect("log lock"));
    Ok(run)
}

fn coordinate(
    cluster: &mut Cluster,
    commands: &Receiver<Command>,
    sink: &mut dyn FnMut(Update),
    out_rx: &Receiver<Outbound>,
) -> anyhow::Result<LearningRun> {
    let cfg = cluster.cfg.clone();
    let deadline = Nanos::from_secs_f64(cfg.transport.max_time_s);
    let mut churn = cfg.churn.clone();
    let mut rounds: Vec<RoundReport> = Vec::new();
    let mut rtts = Vec::new();
    let mut events = Vec::new();
    let mut statuses: BTreeMap<NodeId, NodeStatusRow> = BTreeMap::new();
    let mut counters: BTreeMap<NodeId, (u64, u64, Nanos)> = BTreeMap::new();
    let (mut log2_sum, mut emissions) = (0.0f64, 0usize);
    let mut next_report = Nanos::from_secs(1);
    let mut completed = false;
    loop {
        loop {
            match commands.try_recv() {
                Ok(Command::Kill(id)) => {
                    cluster.kill(id);
                    statuses.remove(&id);
                }
                Ok(Command::Add) => {
                    cluster.add()?;
                }
                Ok(Command::Reconfigure(c)) => {
                    cluster.node_config = c;
                    for h in cluster.handles.values().filter(|h| h.alive) {
                        let _ = h.inbox.send(Inbound::Config(c));
                    }
                }
                Ok(Command::Stop) => {
                    sink(Update::Finished {
                        completed: false,
                        t_s: cluster.shared.now().as_secs_f64(),
                    });
                    return Ok(assemble(false, cluster.shared.now(), rounds, rtts, events));
                }
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
            }
        }
        match out_rx.recv_timeout(Duration::from_millis(50)) {
            Ok(Outbound::Event(t, node, event)) => {
                let alive = cluster.handles.get(&node).is_some_and(|h| h.alive);
                match &event {
                    NodeEvent::Round(r) if alive => {
                        sink(Update::Round(RoundRow::from(r)));
                        rounds.push(r.clone());
                        if let Some(h) = cluster.handles.get_mut(&node) {
                            h.epoch = r.epoch + 1;
                            h.finished = h.epoch >= cfg.learn.rounds;
                        }
                        fire_churn(cluster, &mut churn)?;
                    }
                    NodeEvent::Acked { rtt, .. } => rtts.push(*rtt),
                    NodeEvent::ConfigApplied(v) if node == NodeId(0) => sink(Update::ConfigApplied { version: *v }),
                    _ => {}
                }
                events.push(SimEvent { t, node, event });
            }
            Ok(Outbound::Status {
                status,
                t,
                processed,
                log2_sum: l,
                emissions: n,
            }) => {
                let id = status.node_id;
                if cluster.handles.get(&id).is_some_and(|h| h.alive) {
                    let (e0, p0, t0) = counters
                        .insert(id, (status.mixer.emitted, processed, t))
                        .unwrap_or((0, 0, Nanos::ZERO));
                    let dt = t.saturating_sub(t0).as_secs_f64().max(1e-9);
                    let send = (status.mixer.emitted - e0) as f64 / dt;
                    let recv = (processed - p0) as f64 / dt;
                    statuses.insert(id, NodeStatusRow::from_status(&status, t, send, recv));
                    log2_sum += l;
                    emissions += n;
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        let now = cluster.shared.now();
        if now >= next_report {
            sink(Update::Status(statuses.values().cloned().collect()));
            if emissions >= mixfed_core::metrics::MIN_EMISSIONS {
                let (o, k) = (cluster.node_config.mix.outbox_size, cfg.route.k_max);
                sink(Update::Entropy(EntropyRow {
                    t_s: now.as_secs_f64(),
                    outbox_size: o,
                    k_max: k,
                    emissions,
                    relay_entropy_bits: log2_sum / emissions as f64,
                    relay_entropy_ceiling_bits: (o as f64).log2(),
                    path_entropy_bits: path_entropy(o, k),
                }));
                (log2_sum, emissions) = (0.0, 0);
            }
            next_report = now + Nanos::from_secs(1);
        }
        if cluster.handles.values().filter(|h| h.alive).all(|h| h.finished) {
            completed = true;
            break;
        }
        if now >= deadline {
            break;
        }
    }
    let now = cluster.shared.now();
    sink(Update::Finished {
        completed,
        t_s: now.as_secs_f64(),
    });
    Ok(assemble(completed, now, rounds, rtts, events))
}

fn assemble(finished: bool, now: Nanos, rounds: Vec<RoundReport>, rtts: Vec<Nanos>, events: Vec<SimEvent>) -> LearningRun {
    LearningRun {
        finished,
        sim_time: now,
        rounds,
        rtts,
        events,
        log: ObservationLog::default(),
        entropy: None,
    }
}

/// Same rule as the simulator: `at_round R` fires once every running
/// learner has completed round `R - 1`.
fn fire_churn(cluster: &mut Cluster, churn: &mut Vec<crate::config::ChurnStep>) -> anyhow::Result<()> {
    loop {
        let Some(min) = cluster.handles.values().filter(|h| h.alive).map(|h| h.epoch).min() else {
            return Ok(());
        };
        let Some(pos) = churn.iter().position(|c| c.at_round <= min + 1) else {
            return Ok(());
        };
        let step = churn.remove(pos);
        match step.action {
            ChurnAction::Kill => {
                if let Some(id) = step.node_id {
                    cluster.kill(NodeId(id));
                }
            }
            ChurnAction::Add => {
                cluster.add()?;
            }
        }
    }
}

/// Runs a scenario over localhost TCP to completion.
pub fn run_learning_tcp(cfg: &ScenarioConfig) -> anyhow::Result<LearningRun> {
    let (_keep, rx) = mpsc::channel();
    drive_tcp(cfg, &rx, &mut |_| {})
}
