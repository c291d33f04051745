//! What a global passive observer sees, and how unlinkable it is.
//!
//! [`ObservationLog`] is the adversary's view: timestamped link events
//! carrying only endpoints, length and a digest of the wire bytes.
//! Ground truth from instrumented runs ([`EmissionRecord`]) is kept apart
//! and used only to score metrics, never handed to an adversary.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Nanos;
use crate::id::NodeId;
use crate::mixer::ItemKind;

/// Minimum number of emissions before a relay statistic is reported.
pub const MIN_EMISSIONS: usize = 100;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    #[error("need at least {need} events, have {have}")]
    InsufficientEvents { have: usize, need: usize },
}

/// First eight bytes of SHA-256 over the wire bytes.
pub fn digest(bytes: &[u8]) -> u64 {
    let h = Sha256::digest(bytes);
    u64::from_be_bytes(h[..8].try_into().expect("8 bytes"))
}

/// One frame crossing one link.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct LinkEvent {
    pub t: Nanos,
    pub from: NodeId,
    pub to: NodeId,
    pub len: u32,
    pub digest: u64,
}

/// Append-only record of every mixnet frame on every link.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObservationLog {
    events: Vec<LinkEvent>,
}

impl ObservationLog {
    pub fn push(&mut self, event: LinkEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[LinkEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events in `[from, to)`, assuming the log is time-ordered.
    pub fn window(&self, from: Nanos, to: Nanos) -> &[LinkEvent] {
        let lo = self.events.partition_point(|e| e.t < from);
        let hi = self.events.partition_point(|e| e.t < to);
        &self.events[lo..hi.max(lo)]
    }

    /// Every event has length `len`.
    pub fn uniform_length(&self, len: u32) -> bool {
        self.events.iter().all(|e| e.len == len)
    }

    /// Timestamps never decrease along any single link.
    pub fn per_link_monotone(&self) -> bool {
        let mut last: BTreeMap<(NodeId, NodeId), Nanos> = BTreeMap::new();
        self.events.iter().all(|e| {
            let prev = last.insert((e.from, e.to), e.t);
            prev.map_or(true, |p| p <= e.t)
        })
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| u64::from(e.len)).sum()
    }

    pub fn bytes_from(&self, node: NodeId) -> u64 {
        self.events
            .iter()
            .filter(|e| e.from == node)
            .map(|e| u64::from(e.len))
            .sum()
    }
}

/// Ground truth about one emission, from an instrumented mixer.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct EmissionRecord {
    pub t: Nanos,
    pub node: NodeId,
    pub kind: ItemKind,
    pub occupancy: usize,
    pub batch: u64,
    pub queued_index: usize,
    pub emitted_index: usize,
    /// Set on relayed items: digest of the incoming packet.
    pub probe: Option<u64>,
}

/// `(K - 1)/K * 1/O`: chance of correlating one incoming packet with its
/// outgoing successor at a relay under uniform mixing.
pub fn relay_match_bound(o: usize, k: usize) -> f64 {
    let (o, k) = (o.max(1) as f64, k.max(1) as f64);
    (k - 1.0) / k / o
}

/// `log2(sum_{k=1..K} O^k)`, evaluated as
/// `K log2 O + log2(sum_{j=0..K-1} O^-j)` so large `O^K` cannot overflow.
pub fn path_entropy(o: usize, k: usize) -> f64 {
    let o = o.max(1) as f64;
    let k = k.max(1);
    let inv = 1.0 / o;
    let mut tail = 0.0;
    let mut term = 1.0;
    for _ in 0..k {
        tail += term;
        term *= inv;
    }
    k as f64 * libm::log2(o) + libm::log2(tail)
}

/// Mean of `log2(occupancy)` over emissions: the entropy of a uniform
/// posterior over the outbox occupants at each send.
pub fn relay_entropy(emissions: &[EmissionRecord]) -> Result<f64, MetricsError> {
    if emissions.len() < MIN_EMISSIONS {
        return Err(MetricsError::InsufficientEvents {
            have: emissions.len(),
            need: MIN_EMISSIONS,
        });
    }
    let sum: f64 = emissions.iter().map(|e| libm::log2(e.occupancy.max(1) as f64)).sum();
    Ok(sum / emissions.len() as f64)
}

/// Success rate of the batch-order adversary at a relay.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct RelayMatch {
    /// Incoming packets processed by the relay (forwarded or terminated).
    pub trials: u64,
    pub hits: u64,
    pub rate: f64,
}

impl RelayMatch {
    /// Binomial standard error at success probability `p`.
    pub fn standard_error(&self, p: f64) -> f64 {
        libm::sqrt(p * (1.0 - p) / self.trials.max(1) as f64)
    }

    pub fn merge(self, other: RelayMatch) -> RelayMatch {
        let trials = self.trials + other.trials;
        let hits = self.hits + other.hits;
        RelayMatch {
            trials,
            hits,
            rate: hits as f64 / trials.max(1) as f64,
        }
    }
}

/// Scores the adversary that, for every packet entering a relay, guesses
/// the outgoing packet at the same position in the same batch. Packets
/// that terminate at the relay have no successor and always count as
/// misses; with a uniform shuffle a forwarded packet is hit with
/// probability `1/O`.
///
/// `processed` is the number of incoming packets the relay peeled.
pub fn empirical_relay_match(emissions: &[EmissionRecord], processed: u64) -> Result<RelayMatch, MetricsError> {
    if emissions.len() < MIN_EMISSIONS {
        return Err(MetricsError::InsufficientEvents {
            have: emissions.len(),
            need: MIN_EMISSIONS,
        });
    }
    let hits = emissions
        .iter()
        .filter(|e| e.probe.is_some() && e.queued_index == e.emitted_index)
        .count() as u64;
    Ok(RelayMatch {
        trials: processed,
        hits,
        rate: hits as f64 / processed.max(1) as f64,
    })
}

#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct EntropyReport {
    pub outbox_size: usize,
    pub k_max: usize,
    pub relay_entropy_bits: f64,
    pub relay_entropy_ceiling_bits: f64,
    pub path_entropy_bits: f64,
}

/// Outcome of the distinguishing game.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct GameResult {
    pub trials: u64,
    pub correct: u64,
    /// `|correct/trials - 1/2|`.
    pub advantage: f64,
    /// Wald 95% half-width of the success rate (hence of the advantage).
    pub ci95: f64,
}

impl GameResult {
    pub fn from_counts(trials: u64, correct: u64) -> Self {
        let n = trials.max(1) as f64;
        let p = correct as f64 / n;
        GameResult {
            trials,
            correct,
            advantage: libm::fabs(p - 0.5),
            ci95: 1.96 * libm::sqrt(p * (1.0 - p) / n),
        }
    }

    pub fn ci_lower(&self) -> f64 {
        (self.advantage - self.ci95).max(0.0)
    }

    pub fn ci_upper(&self) -> f64 {
        self.advantage + self.ci95
    }

    /// Whether zero advantage is inside the interval.
    pub fn ci_contains_zero(&self) -> bool {
        self.advantage - self.ci95 <= 0.0
    }
}

/// What the adversary gets in one trial: the observation plus the public
/// game parameters.
#[derive(Copy, Clone, Debug)]
pub struct GameView<'a> {
    pub log: &'a ObservationLog,
    /// Candidate for `b = 0`.
    pub n_a: NodeId,
    /// Candidate for `b = 1`.
    pub n_b: NodeId,
    pub victim: NodeId,
    /// Slot in which the target message reached the victim.
    pub window: (Nanos, Nanos),
}

/// A passive adversary outputs a guess `b'` for the hidden bit.
pub trait Adversary {
    fn name(&self) -> &'static str;
    fn guess(&mut self, view: &GameView<'_>) -> u8;
}

/// Guesses uniformly at random.
#[derive(Clone, Debug)]
pub struct CoinFlip {
    rng: ChaCha20Rng,
}

impl CoinFlip {
    pub fn new(seed: u64) -> Self {
        CoinFlip {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }
}

impl Adversary for CoinFlip {
    fn name(&self) -> &'static str {
        "coin_flip"
    }

    fn guess(&mut self, _view: &GameView<'_>) -> u8 {
        self.rng.gen_range(0..2)
    }
}

/// Scores each candidate by how many frames it sent to the victim from
/// `lookback` before the revealed slot until the slot's end, and picks
/// the higher score (ties by coin flip).
#[derive(Clone, Debug)]
pub struct TimingCorrelation {
    pub lookback: Nanos,
    rng: ChaCha20Rng,
}

impl TimingCorrelation {
    pub fn new(lookback: Nanos, seed: u64) -> Self {
        TimingCorrelation {
            lookback,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn scores(&self, view: &GameView<'_>) -> (usize, usize) {
        let (start, end) = view.window;
        let events = view.log.window(start.saturating_sub(self.lookback), end);
        let count = |n: NodeId| events.iter().filter(|e| e.from == n && e.to == view.victim).count();
        (count(view.n_a), count(view.n_b))
    }
}

impl Adversary for TimingCorrelation {
    fn name(&self) -> &'static str {
        "timing_correlation"
    }

    fn guess(&mut self, view: &GameView<'_>) -> u8 {
        let (a, b) = self.scores(view);
        match a.cmp(&b) {
            core::cmp::Ordering::Greater => 0,
            core::cmp::Ordering::Less => 1,
            core::cmp::Ordering::Equal => self.rng.gen_range(0..2),
        }
    }
}

/// Round-trip and rate summary.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct CommMetrics {
    pub rtt_count: usize,
    pub rtt_mean_s: f64,
    pub rtt_p50_s: f64,
    pub rtt_p95_s: f64,
    /// Mean bytes per second emitted by one node.
    pub output_rate_bytes_s: f64,
    /// Bytes per second over all links.
    pub total_bytes_s: f64,
}

/// Rates from link events in `[from, to)` plus the RTT samples measured
/// from fragment send to acknowledgment unwrap. Needs at least 10 s.
pub fn comm_metrics(
    log: &ObservationLog,
    rtts: &[Nanos],
    nodes: &[NodeId],
    from: Nanos,
    to: Nanos,
) -> Result<CommMetrics, MetricsError> {
    let span = to.saturating_sub(from).as_secs_f64();
    if span < 10.0 || nodes.is_empty() {
        return Err(MetricsError::InsufficientEvents {
            have: libm::floor(span) as usize,
            need: 10,
        });
    }
    let events = log.window(from, to);
    let total: u64 = events.iter().map(|e| u64::from(e.len)).sum();
    let per_node: u64 = events
        .iter()
        .filter(|e| nodes.contains(&e.from))
        .map(|e| u64::from(e.len))
        .sum();
    let mut sorted: Vec<f64> = rtts.iter().map(|r| r.as_secs_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let mean = if sorted.is_empty() {
        0.0
    } else {
        sorted.iter().sum::<f64>() / sorted.len() as f64
    };
    Ok(CommMetrics {
        rtt_count: sorted.len(),
        rtt_mean_s: mean,
        rtt_p50_s: quantile(&sorted, 0.5),
        rtt_p95_s: quantile(&sorted, 0.95),
        output_rate_bytes_s: per_node as f64 / span / nodes.len() as f64,
        total_bytes_s: total as f64 / span,
    })
}

/// Nearest-rank quantile of sorted samples; 0 when empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = libm::ceil(q * sorted.len() as f64) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Area under the ROC curve of `scores` for positives versus negatives
/// (Mann–Whitney, ties count one half).
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positive.len() as f64 * negative.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn bound_values() {
        assert!((relay_match_bound(10, 2) - 0.05).abs() < 1e-15);
        assert_eq!(relay_match_bound(10, 1), 0.0);
        assert!((relay_match_bound(150, 2) - 1.0 / 300.0).abs() < 1e-15);
    }

    #[test]
    fn path_entropy_edges() {
        assert_eq!(path_entropy(1, 1), 0.0);
        assert!((path_entropy(10, 2) - libm::log2(110.0)).abs() < 1e-12);
    }

    #[test]
    fn relay_entropy_needs_events() {
        let e = EmissionRecord {
            t: Nanos::ZERO,
            node: NodeId(1),
            kind: ItemKind::Cover,
            occupancy: 1,
            batch: 0,
            queued_index: 0,
            emitted_index: 0,
            probe: None,
        };
        assert!(relay_entropy(&vec![e; 10]).is_err());
        assert_eq!(relay_entropy(&vec![e; 100]).unwrap(), 0.0);
    }

    #[test]
    fn game_result_ci() {
        let g = GameResult::from_counts(500, 250);
        assert_eq!(g.advantage, 0.0);
        assert!(g.ci_contains_zero());
        assert!((g.ci95 - 1.96 * (0.25f64 / 500.0).sqrt()).abs() < 1e-12);
        let all = GameResult::from_counts(500, 500);
        assert_eq!(all.advantage, 0.5);
        assert!(!all.ci_contains_zero());
    }

    #[test]
    fn log_window_and_checks() {
        let mut log = ObservationLog::default();
        for t in 0..10u64 {
            log.push(LinkEvent {
                t: Nanos(t * 10),
                from: NodeId(1),
                to: NodeId(2),
                len: 1024,
                digest: t,
            });
        }
        assert_eq!(log.window(Nanos(20), Nanos(50)).len(), 3);
        assert!(log.uniform_length(1024));
        assert!(log.per_link_monotone());
        assert_eq!(log.total_bytes(), 10 * 1024);
    }

    #[test]
    fn quantiles_and_auc() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.0);
        assert_eq!(quantile(&s, 0.95), 4.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0]), 0.5);
        assert_eq!(auc(&[2.0], &[1.0]), 1.0);
    }
}
