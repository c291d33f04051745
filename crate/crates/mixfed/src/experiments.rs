//! Measurements built on the simulator: learning runs, relay audits,
//! communication sweeps and the distinguishing game.

use std::collections::BTreeMap;

use mixfed_core::metrics::{
    self, comm_metrics, empirical_relay_match, path_entropy, relay_entropy, relay_match_bound, Adversary, CoinFlip,
    CommMetrics, EntropyReport, GameResult, GameView, ObservationLog, RelayMatch, TimingCorrelation,
};
use mixfed_core::node::{NodeEvent, RoundReport};
use mixfed_core::seed::derive_seed;
use mixfed_core::{Nanos, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::sim::{SimEvent, SimOptions, Simulation};

/// Everything a finished learning run produced.
#[derive(Clone, Debug)]
pub struct LearningRun {
    pub finished: bool,
    pub sim_time: Nanos,
    pub rounds: Vec<RoundReport>,
    pub rtts: Vec<Nanos>,
    pub events: Vec<SimEvent>,
    pub log: ObservationLog,
    /// Relay entropy over every emission of the run (simulator only).
    pub entropy: Option<EntropyReport>,
}

/// Per-epoch view across nodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub round: u32,
    pub nodes: usize,
    pub mean_local_accuracy: f64,
    pub mean_aggregated_accuracy: f64,
    pub local_variance: f64,
    pub aggregated_variance: f64,
    pub mean_coverage: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

impl LearningRun {
    pub fn summaries(&self) -> Vec<EpochSummary> {
        let mut by_epoch: BTreeMap<u32, Vec<&RoundReport>> = BTreeMap::new();
        for r in &self.rounds {
            by_epoch.entry(r.epoch).or_default().push(r);
        }
        by_epoch
            .into_iter()
            .map(|(epoch, rs)| {
                let local: Vec<f64> = rs.iter().map(|r| r.local.accuracy).collect();
                let agg: Vec<f64> = rs.iter().map(|r| r.aggregated.accuracy).collect();
                let cov: Vec<f64> = rs.iter().map(|r| r.coverage.covered_fraction).collect();
                let (ml, vl) = mean_var(&local);
                let (ma, va) = mean_var(&agg);
                EpochSummary {
                    round: epoch + 1,
                    nodes: rs.len(),
                    mean_local_accuracy: ml,
                    mean_aggregated_accuracy: ma,
                    local_variance: vl,
                    aggregated_variance: va,
                    mean_coverage: mean_var(&cov).0,
                }
            })
            .collect()
    }

    /// Mean aggregated accuracy in `round` over the given nodes only.
    pub fn accuracy_of(&self, round: u32, nodes: &[NodeId]) -> Option<f64> {
        let xs: Vec<f64> = self
            .rounds
            .iter()
            .filter(|r| r.epoch + 1 == round && nodes.contains(&r.node))
            .map(|r| r.aggregated.accuracy)
            .collect();
        (!xs.is_empty()).then(|| mean_var(&xs).0)
    }
}

pub fn run_learning(cfg: &ScenarioConfig) -> anyhow::Result<LearningRun> {
    let mut sim = Simulation::new(
        cfg,
        SimOptions {
            learn: true,
            observe: true,
            trace: true,
            ..SimOptions::default()
        },
    )?;
    let finished = sim.run_learning();
    let (o, k) = (cfg.mix.outbox_size, cfg.route.k_max);
    let entropy = relay_entropy(sim.emissions()).ok().map(|bits| EntropyReport {
        outbox_size: o,
        k_max: k,
        relay_entropy_bits: bits,
        relay_entropy_ceiling_bits: (o as f64).log2(),
        path_entropy_bits: path_entropy(o, k),
    });
    let events = sim.take_events();
    let mut rounds = Vec::new();
    let mut rtts = Vec::new();
    for e in &events {
        match &e.event {
            NodeEvent::Round(r) => rounds.push(r.clone()),
            NodeEvent::Acked { rtt, .. } => rtts.push(*rtt),
            _ => {}
        }
    }
    Ok(LearningRun {
        finished,
        sim_time: sim.now(),
        rounds,
        rtts,
        events,
        log: sim.take_log(),
        entropy,
    })
}

/// Ground-truth audit of the mixing at every relay.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixingAudit {
    pub outbox_size: usize,
    pub k_max: usize,
    pub shuffle: bool,
    pub emissions: usize,
    pub relay_trials: u64,
    pub relay_hits: u64,
    pub match_rate: f64,
    pub bound: f64,
    /// Binomial standard error at the bound.
    pub standard_error: f64,
    pub within_bound: bool,
    pub relay_entropy_bits: f64,
    pub relay_entropy_ceiling_bits: f64,
    pub path_entropy_bits: f64,
}

/// Runs the scenario under synthetic load (`adversary.background_rate_hz`
/// per node) with ground-truth tracing until `min_emissions` packets left
/// the mixers, then scores the batch-order adversary and the entropy.
pub fn mixing_audit(cfg: &ScenarioConfig, min_emissions: usize) -> anyhow::Result<MixingAudit> {
    let mut sim = Simulation::new(
        cfg,
        SimOptions {
            trace: true,
            background_hz: cfg.adversary.background_rate_hz,
            ..SimOptions::default()
        },
    )?;
    let deadline = Nanos::from_secs_f64(cfg.transport.max_time_s);
    sim.run_while(deadline, |s| s.emissions().len() >= min_emissions);
    sim.take_events();
    let ids: Vec<NodeId> = sim.alive().collect();
    let processed: u64 = ids.iter().map(|&id| sim.processed(id)).sum::<u64>() - sim.relays_in_flight();
    let matched: RelayMatch = empirical_relay_match(sim.emissions(), processed)?;
    let (o, k) = (cfg.mix.outbox_size, cfg.route.k_max);
    let bound = relay_match_bound(o, k);
    let se = matched.standard_error(bound);
    Ok(MixingAudit {
        outbox_size: o,
        k_max: k,
        shuffle: cfg.mix.shuffle,
        emissions: sim.emissions().len(),
        relay_trials: matched.trials,
        relay_hits: matched.hits,
        match_rate: matched.rate,
        bound,
        standard_error: se,
        within_bound: matched.rate <= bound + 3.0 * se,
        relay_entropy_bits: relay_entropy(sim.emissions())?,
        relay_entropy_ceiling_bits: (o as f64).log2(),
        path_entropy_bits: path_entropy(o, k),
    })
}

impl MixingAudit {
    pub fn entropy_report(&self) -> EntropyReport {
        EntropyReport {
            outbox_size: self.outbox_size,
            k_max: self.k_max,
            relay_entropy_bits: self.relay_entropy_bits,
            relay_entropy_ceiling_bits: self.relay_entropy_ceiling_bits,
            path_entropy_bits: self.path_entropy_bits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommPoint {
    pub mu_s: f64,
    pub k_max: usize,
    pub rtt_count: usize,
    pub rtt_mean_s: f64,
    pub rtt_p50_s: f64,
    pub rtt_p95_s: f64,
    pub output_rate_bytes_s: f64,
    pub total_bytes_s: f64,
}

/// Round trips and link rates under a steady synthetic workload of
/// `workload_hz` messages per node per second, measured over
/// `[warmup_s, warmup_s + span_s)`.
pub fn comm_point(cfg: &ScenarioConfig, workload_hz: f64, warmup_s: f64, span_s: f64) -> anyhow::Result<CommPoint> {
    let mut sim = Simulation::new(
        cfg,
        SimOptions {
            observe: true,
            background_hz: workload_hz,
            ..SimOptions::default()
        },
    )?;
    let from = Nanos::from_secs_f64(warmup_s);
    let to = Nanos::from_secs_f64(warmup_s + span_s);
    sim.run_until(to);
    let rtts: Vec<Nanos> = sim
        .take_events()
        .into_iter()
        .filter(|e| e.t >= from && e.t < to)
        .filter_map(|e| match e.event {
            NodeEvent::Acked { rtt, .. } => Some(rtt),
            _ => None,
        })
        .collect();
    let nodes: Vec<NodeId> = sim.alive().collect();
    let m: CommMetrics = comm_metrics(sim.log(), &rtts, &nodes, from, to)?;
    Ok(CommPoint {
        mu_s: cfg.mix.mu_s,
        k_max: cfg.route.k_max,
        rtt_count: m.rtt_count,
        rtt_mean_s: m.rtt_mean_s,
        rtt_p50_s: m.rtt_p50_s,
        rtt_p95_s: m.rtt_p95_s,
        output_rate_bytes_s: m.output_rate_bytes_s,
        total_bytes_s: m.total_bytes_s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameOutcome {
    pub trials: u64,
    /// Trials whose target never arrived before the trial deadline; the
    /// adversaries still guess (from an empty slot).
    pub undelivered: u64,
    pub timing: GameSummary,
    pub coin_flip: GameSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GameSummary {
    pub adversary: String,
    pub trials: u64,
    pub correct: u64,
    pub advantage: f64,
    pub ci95: f64,
    pub ci_upper: f64,
    pub ci_contains_zero: bool,
}

impl GameSummary {
    fn new(name: &str, r: GameResult) -> Self {
        GameSummary {
            adversary: name.to_string(),
            trials: r.trials,
            correct: r.correct,
            advantage: r.advantage,
            ci95: r.ci95,
            ci_upper: r.ci_upper(),
            ci_contains_zero: r.ci_contains_zero(),
        }
    }
}

/// One world of the game: the hidden bit picks which candidate sends the
/// target message to the victim after the warm-up; returns the log and
/// the revealed arrival slot.
fn game_trial(cfg: &ScenarioConfig, b: u8, body: Vec<u8>) -> anyhow::Result<(ObservationLog, (Nanos, Nanos), bool)> {
    let a = &cfg.adversary;
    let victim = NodeId(a.victim);
    let sender = if b == 0 { NodeId(a.n_a) } else { NodeId(a.n_b) };
    let mut sim = Simulation::new(
        cfg,
        SimOptions {
            observe: true,
            background_hz: a.background_rate_hz,
            background_exclude: vec![victim],
            ..SimOptions::default()
        },
    )?;
    sim.run_until(Nanos::from_secs_f64(a.warmup_s));
    sim.take_events();
    let target = metrics::digest(&body);
    sim.send_payload(sender, victim, body, u32::MAX - 1)?;
    let deadline = Nanos::from_secs_f64(a.warmup_s + cfg.overlay.retry_timeout_s);
    let mut arrival = None;
    sim.run_while(deadline, |s| {
        for e in s.take_events() {
            if let NodeEvent::Delivered { digest, at } = e.event {
                if e.node == victim && digest == target {
                    arrival = Some(at);
                }
            }
        }
        arrival.is_some()
    });
    let w = Nanos::from_secs_f64(a.window_s);
    let at = arrival.unwrap_or(sim.now());
    let start = Nanos(at.0 / w.0 * w.0);
    Ok((sim.take_log(), (start, start + w), arrival.is_some()))
}

/// Plays `trials` rounds of the distinguishing game against the
/// timing-correlation adversary and a coin flipper, on the same worlds.
pub fn run_game(cfg: &ScenarioConfig, trials: u64) -> anyhow::Result<GameOutcome> {
    let a = &cfg.adversary;
    let seed = cfg.transport.seed;
    let mut challenger = ChaCha20Rng::seed_from_u64(derive_seed(seed, "challenger", 0));
    let mut timing = TimingCorrelation::new(Nanos::from_secs_f64(a.window_s), derive_seed(seed, "timing", 0));
    let mut coin = CoinFlip::new(derive_seed(seed, "coin", 0));
    let (mut hit_t, mut hit_c, mut undelivered) = (0u64, 0u64, 0u64);
    for i in 0..trials {
        let b: u8 = challenger.gen_range(0..2);
        let mut body = vec![0u8; 64];
        challenger.fill(&mut body[..]);
        let mut world = cfg.clone();
        world.transport.seed = derive_seed(seed, "trial", i);
        let (log, window, delivered) = game_trial(&world, b, body)?;
        undelivered += u64::from(!delivered);
        let view = GameView {
            log: &log,
            n_a: NodeId(a.n_a),
            n_b: NodeId(a.n_b),
            victim: NodeId(a.victim),
            window,
        };
        hit_t += u64::from(timing.guess(&view) == b);
        hit_c += u64::from(coin.guess(&view) == b);
    }
    Ok(GameOutcome {
        trials,
        undelivered,
        timing: GameSummary::new(timing.name(), GameResult::from_counts(trials, hit_t)),
        coin_flip: GameSummary::new(coin.name(), GameResult::from_counts(trials, hit_c)),
    })
}

pub const SWEEP_PARAMS: [&str; 4] = ["mix.outbox_size", "mix.mu_s", "route.K_max", "n_nodes"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub relay_entropy_bits: f64,
    pub path_entropy_bits: f64,
    pub relay_match_rate: f64,
    pub relay_match_bound: f64,
    pub rtt_mean_s: f64,
    pub rtt_p95_s: f64,
    pub output_rate_bytes_s: f64,
    pub total_bytes_s: f64,
    pub final_accuracy: f64,
}

/// Workload for the round-trip columns of a sweep, in messages per node
/// per second. Low enough that the slowest swept rate is not saturated.
pub const SWEEP_WORKLOAD_HZ: f64 = 5.0;

/// One row per value: mixing audit, round trips under a steady workload
/// and the final aggregated accuracy of a full learning run.
pub fn sweep(cfg: &ScenarioConfig, param: &str, values: &[String], emissions: usize) -> anyhow::Result<Vec<SweepRow>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(crate::config::InvalidConfig::single(param, format!("sweepable parameters are {SWEEP_PARAMS:?}")).into());
    }
    let mut rows = Vec::new();
    for v in values {
        let point = cfg.with_overrides(&[&format!("{param}={v}")])?;
        let audit = mixing_audit(&point, emissions)?;
        let comm = comm_point(&point, SWEEP_WORKLOAD_HZ, 2.0, 10.0)?;
        let run = run_learning(&point)?;
        let last = run.summaries().last().map_or(0.0, |s| s.mean_aggregated_accuracy);
        rows.push(SweepRow {
            param: param.to_string(),
            value: v.clone(),
            relay_entropy_bits: audit.relay_entropy_bits,
            path_entropy_bits: audit.path_entropy_bits,
            relay_match_rate: audit.match_rate,
            relay_match_bound: audit.bound,
            rtt_mean_s: comm.rtt_mean_s,
            rtt_p95_s: comm.rtt_p95_s,
            output_rate_bytes_s: comm.output_rate_bytes_s,
            total_bytes_s: comm.total_bytes_s,
            final_accuracy: last,
        });
    }
    Ok(rows)
}
