//! Long-running scenarios under external control: a command channel in,
//! a stream of monitoring updates out. Used by the manager.

use std::collections::BTreeMap;
use std::sync::mpsc::{Receiver, TryRecvError};
use std::time::{Duration, Instant};

use mixfed_core::metrics::{path_entropy, relay_entropy, MIN_EMISSIONS};
use mixfed_core::node::{NodeConfig, NodeEvent, NodeStatus, RoundReport};
use mixfed_core::{Nanos, NodeId};
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::experiments::{run_game, GameSummary};
use crate::sim::{SimOptions, Simulation};

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Kill(NodeId),
    Add,
    Reconfigure(NodeConfig),
    Stop,
}

/// One node's report, as merged by the manager.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeStatusRow {
    pub node_id: u32,
    /// Seconds of scenario time at which the report was taken.
    pub t_s: f64,
    pub stale: bool,
    pub epoch: u32,
    pub config_version: u64,
    pub queue_occupancy: usize,
    pub outbox_occupancy: usize,
    pub active_peers: usize,
    pub pending_fragments: usize,
    pub emitted: u64,
    pub emitted_cover: u64,
    pub send_rate_pps: f64,
    pub receive_rate_pps: f64,
    pub fragments_sent: u64,
    pub fragments_received: u64,
    pub acked: u64,
    pub relayed: u64,
    pub retransmissions: u64,
    pub abandoned: u64,
    pub last_accuracy: Option<f64>,
    pub last_loss: Option<f64>,
    pub finished: bool,
}

impl NodeStatusRow {
    pub fn from_status(s: &NodeStatus, t: Nanos, send_rate: f64, receive_rate: f64) -> Self {
        NodeStatusRow {
            node_id: s.node_id.0,
            t_s: t.as_secs_f64(),
            stale: false,
            epoch: s.epoch,
            config_version: s.config_version,
            queue_occupancy: s.queue_len,
            outbox_occupancy: s.outbox_len,
            active_peers: s.active_peers,
            pending_fragments: s.pending_fragments,
            emitted: s.mixer.emitted,
            emitted_cover: s.mixer.emitted_cover,
            send_rate_pps: send_rate,
            receive_rate_pps: receive_rate,
            fragments_sent: s.router.fragments_sent,
            fragments_received: s.router.fragments_received,
            acked: s.router.acked,
            relayed: s.router.relayed,
            retransmissions: s.router.retransmissions,
            abandoned: s.router.abandoned,
            last_accuracy: s.last_round.as_ref().map(|r| r.aggregated.accuracy),
            last_loss: s.last_round.as_ref().map(|r| r.aggregated.loss),
            finished: s.finished,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRow {
    pub node_id: u32,
    pub round: u32,
    pub t_s: f64,
    pub trigger: String,
    pub expected_peers: usize,
    pub fragments_used: usize,
    pub local_accuracy: f64,
    pub local_loss: f64,
    pub aggregated_accuracy: f64,
    pub aggregated_loss: f64,
    pub covered_fraction: f64,
    pub mean_contributors: f64,
}

impl From<&RoundReport> for RoundRow {
    fn from(r: &RoundReport) -> Self {
        RoundRow {
            node_id: r.node.0,
            round: r.epoch + 1,
            t_s: r.finished.as_secs_f64(),
            trigger: format!("{:?}", r.trigger).to_lowercase(),
            expected_peers: r.expected_peers,
            fragments_used: r.fragments_used,
            local_accuracy: r.local.accuracy,
            local_loss: r.local.loss,
            aggregated_accuracy: r.aggregated.accuracy,
            aggregated_loss: r.aggregated.loss,
            covered_fraction: r.coverage.covered_fraction,
            mean_contributors: r.coverage.mean_contributors,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyRow {
    pub t_s: f64,
    pub outbox_size: usize,
    pub k_max: usize,
    pub emissions: usize,
    pub relay_entropy_bits: f64,
    pub relay_entropy_ceiling_bits: f64,
    pub path_entropy_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Update {
    /// Reports from the nodes that are still running.
    Status(Vec<NodeStatusRow>),
    Round(RoundRow),
    Entropy(EntropyRow),
    Game(GameSummary),
    ConfigApplied { version: u64 },
    Finished { completed: bool, t_s: f64 },
}

/// Runs a simulated scenario, sleeping `pace` real seconds per simulated
/// second (0 runs flat out), applying commands between slices and
/// reporting at 1 Hz of scenario time. Returns after the rounds finish
/// (and the game, if enabled) or on [`Command::Stop`].
pub fn drive_sim(cfg: &ScenarioConfig, pace: f64, commands: &Receiver<Command>, sink: &mut dyn FnMut(Update)) -> anyhow::Result<()> {
    let mut sim = Simulation::new(
        cfg,
        SimOptions {
            learn: true,
            trace: true,
            ..SimOptions::default()
        },
    )?;
    let slice = Nanos::from_millis(100);
    let report_every = Nanos::from_secs(1);
    let deadline = Nanos::from_secs_f64(cfg.transport.max_time_s);
    let mut next_report = report_every;
    let mut counters: BTreeMap<NodeId, (u64, u64)> = BTreeMap::new();
    let mut last_report = Nanos::ZERO;
    let started = Instant::now();
    loop {
        loop {
            match commands.try_recv() {
                Ok(Command::Kill(id)) => {
                    sim.kill(id);
                }
                Ok(Command::Add) => {
                    sim.add_node();
                }
                Ok(Command::Reconfigure(c)) => {
                    sim.redeploy(c);
                }
                Ok(Command::Stop) | Err(TryRecvError::Disconnected) => {
                    sink(Update::Finished {
                        completed: false,
                        t_s: sim.now().as_secs_f64(),
                    });
                    return Ok(());
                }
                Err(TryRecvError::Empty) => break,
            }
        }
        let target = sim.now() + slice;
        sim.run_until(target);
        for e in sim.take_events() {
            match &e.event {
                NodeEvent::Round(r) => sink(Update::Round(RoundRow::from(r))),
                NodeEvent::ConfigApplied(v) if e.node == NodeId(0) || !sim.is_alive(NodeId(0)) => {
                    sink(Update::ConfigApplied { version: *v })
                }
                _ => {}
            }
        }
        if sim.now() >= next_report {
            let dt = sim.now().saturating_sub(last_report).as_secs_f64().max(1e-9);
            let mut rows = Vec::new();
            for (status, alive) in sim.statuses() {
                if !alive {
                    continue;
                }
                let id = status.node_id;
                let processed = sim.processed(id);
                let (e0, p0) = counters.insert(id, (status.mixer.emitted, processed)).unwrap_or((0, 0));
                let send = (status.mixer.emitted - e0) as f64 / dt;
                let recv = (processed - p0) as f64 / dt;
                rows.push(NodeStatusRow::from_status(&status, sim.now(), send, recv));
            }
            sink(Update::Status(rows));
            let emissions = sim.take_emissions();
            if emissions.len() >= MIN_EMISSIONS {
                let (o, k) = (sim.config().mix.outbox_size, sim.config().route.k_max);
                sink(Update::Entropy(EntropyRow {
                    t_s: sim.now().as_secs_f64(),
                    outbox_size: o,
                    k_max: k,
                    emissions: emissions.len(),
                    relay_entropy_bits: relay_entropy(&emissions)?,
                    relay_entropy_ceiling_bits: (o as f64).log2(),
                    path_entropy_bits: path_entropy(o, k),
                }));
            }
            last_report = sim.now();
            next_report += report_every;
        }
        if sim.learning_done() || sim.now() >= deadline {
            break;
        }
        if pace > 0.0 {
            let due = started + Duration::from_secs_f64(sim.now().as_secs_f64() * pace);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
    let completed = sim.learning_done();
    if cfg.adversary.enabled {
        let game = run_game(cfg, cfg.adversary.trials)?;
        sink(Update::Game(game.timing));
        sink(Update::Game(game.coin_flip));
    }
    sink(Update::Finished {
        completed,
        t_s: sim.now().as_secs_f64(),
    });
    Ok(())
}
