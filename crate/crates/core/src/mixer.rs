//! Per-node temporal mixing.
//!
//! Everything a node sends (its own fragments, relayed packets, reply
//! packets, covers) goes through one FIFO queue. When the outbox runs dry
//! the next `O` items move into it, cover packets top it up to exactly
//! `O`, and the batch is permuted uniformly. One item leaves per sampled
//! interval, so the emission rate is `1/mu` no matter how much real
//! traffic exists.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::clock::Nanos;
use crate::id::NodeId;
use crate::onion::OnionPacket;

const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum MixConfigError {
    #[error("outbox_size must be at least 1")]
    OutboxSize,
    #[error("mu_s must be a positive finite number, got {0}")]
    Mu(f64),
    #[error("sigma_s must be a non-negative finite number, got {0}")]
    Sigma(f64),
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MixConfig {
    /// `O`: batch size moved into the outbox at each refill.
    pub outbox_size: usize,
    /// Mean emission interval in seconds.
    pub mu_s: f64,
    /// Standard deviation of the emission interval in seconds.
    pub sigma_s: f64,
    /// Ablation switch: keep FIFO order inside a batch when false.
    pub shuffle: bool,
    /// Ablation switch: never generate cover packets when false.
    pub cover: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            outbox_size: 10,
            mu_s: 0.005,
            sigma_s: 0.001,
            shuffle: true,
            cover: true,
        }
    }
}

impl MixConfig {
    pub fn new(outbox_size: usize, mu_s: f64, sigma_s: f64) -> Result<Self, MixConfigError> {
        let config = MixConfig {
            outbox_size,
            mu_s,
            sigma_s,
            ..MixConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), MixConfigError> {
        if self.outbox_size == 0 {
            return Err(MixConfigError::OutboxSize);
        }
        if !(self.mu_s.is_finite() && self.mu_s > 0.0) {
            return Err(MixConfigError::Mu(self.mu_s));
        }
        if !(self.sigma_s.is_finite() && self.sigma_s >= 0.0) {
            return Err(MixConfigError::Sigma(self.sigma_s));
        }
        Ok(())
    }
}

/// Draws one interval (seconds) from the normal law truncated to `(0, inf)`.
///
/// Non-positive draws are rejected and redrawn; after 100 rejections the
/// mean is returned. `sigma = 0` yields exactly `mu`.
pub fn sample_interval_secs<R: Rng + ?Sized>(config: &MixConfig, rng: &mut R) -> f64 {
    if config.sigma_s == 0.0 {
        return config.mu_s;
    }
    let Ok(normal) = Normal::new(config.mu_s, config.sigma_s) else {
        return config.mu_s;
    };
    for _ in 0..MAX_RESAMPLES {
        let x = normal.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
    config.mu_s
}

/// [`sample_interval_secs`] rounded to whole nanoseconds, never zero.
pub fn sample_interval<R: Rng + ?Sized>(config: &MixConfig, rng: &mut R) -> Nanos {
    let ns = Nanos::from_secs_f64(sample_interval_secs(config, rng));
    if ns == Nanos::ZERO {
        Nanos(1)
    } else {
        ns
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ItemKind {
    /// Originated here: fragments and join announcements.
    Real,
    /// A peeled packet being forwarded.
    Relay,
    /// An acknowledgment wrapped in a reply block.
    SurbReply,
    Cover,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueItem {
    pub kind: ItemKind,
    pub packet: OnionPacket,
    pub first_hop: NodeId,
    /// Instrumentation only: digest of the incoming packet a relay item was
    /// peeled from. Set by simulations that audit relay matching; never
    /// affects scheduling.
    pub probe: Option<u64>,
}

impl QueueItem {
    pub fn new(kind: ItemKind, packet: OnionPacket, first_hop: NodeId) -> Self {
        QueueItem {
            kind,
            packet,
            first_hop,
            probe: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    item: QueueItem,
    queued_index: usize,
}

/// One packet leaving the node, with the ground truth needed for metrics.
#[derive(Clone, Debug)]
pub struct Emission {
    pub item: QueueItem,
    /// Outbox occupancy right before this item left.
    pub occupancy: usize,
    /// Refill counter of the batch the item belonged to.
    pub batch: u64,
    /// Position inside the batch before the shuffle (reals first, FIFO).
    pub queued_index: usize,
    /// Position inside the batch at which it was sent.
    pub emitted_index: usize,
    pub next_deadline: Nanos,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct MixerStats {
    pub enqueued: u64,
    pub emitted: u64,
    pub emitted_cover: u64,
    pub refills: u64,
    /// Deadlines that passed with nothing to send (only without cover).
    pub idle_ticks: u64,
}

#[derive(Clone, Debug)]
pub struct Mixer {
    config: MixConfig,
    queue: VecDeque<QueueItem>,
    outbox: VecDeque<Slot>,
    batch: u64,
    emitted_in_batch: usize,
    deadline: Nanos,
    rng: ChaCha20Rng,
    stats: MixerStats,
}

impl Mixer {
    /// The first emission is due one sampled interval after `now`.
    pub fn new(config: MixConfig, seed: u64, now: Nanos) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let deadline = now + sample_interval(&config, &mut rng);
        Mixer {
            config,
            queue: VecDeque::new(),
            outbox: VecDeque::new(),
            batch: 0,
            emitted_in_batch: 0,
            deadline,
            rng,
            stats: MixerStats::default(),
        }
    }

    pub fn config(&self) -> &MixConfig {
        &self.config
    }

    /// Applies new parameters without draining anything: a new `O` takes
    /// effect at the next refill, a new interval law at the next sample.
    pub fn set_config(&mut self, config: MixConfig) {
        self.config = config;
    }

    pub fn enqueue(&mut self, item: QueueItem) {
        self.stats.enqueued += 1;
        self.queue.push_back(item);
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn outbox_len(&self) -> usize {
        self.outbox.len()
    }

    pub fn deadline(&self) -> Nanos {
        self.deadline
    }

    pub fn stats(&self) -> MixerStats {
        self.stats
    }

    pub fn queued(&self) -> impl Iterator<Item = &QueueItem> {
        self.queue.iter()
    }

    /// Current outbox contents in emission order.
    pub fn outbox(&self) -> impl Iterator<Item = &QueueItem> {
        self.outbox.iter().map(|s| &s.item)
    }

    /// Drops every queued or outboxed item matching `pred`, e.g. packets
    /// whose first hop has departed. Returns how many were removed.
    pub fn purge(&mut self, mut pred: impl FnMut(&QueueItem) -> bool) -> usize {
        let before = self.queue.len() + self.outbox.len();
        self.queue.retain(|i| !pred(i));
        self.outbox.retain(|s| !pred(&s.item));
        before - self.queue.len() - self.outbox.len()
    }

    /// Moves up to `O` queued items into the empty outbox, pads with covers
    /// from `make_cover` (when enabled), and permutes the batch.
    ///
    /// Does nothing if the outbox still holds items.
    pub fn refill(&mut self, make_cover: &mut dyn FnMut() -> Option<QueueItem>) {
        if !self.outbox.is_empty() {
            return;
        }
        let o = self.config.outbox_size;
        let real = o.min(self.queue.len());
        let mut slots: Vec<Slot> = Vec::with_capacity(o);
        for queued_index in 0..real {
            let item = self.queue.pop_front().expect("counted above");
            slots.push(Slot { item, queued_index });
        }
        if self.config.cover {
            while slots.len() < o {
                let Some(item) = make_cover() else { break };
                let queued_index = slots.len();
                slots.push(Slot { item, queued_index });
            }
        }
        if slots.is_empty() {
            return;
        }
        if self.config.shuffle {
            slots.shuffle(&mut self.rng);
        }
        self.outbox.extend(slots);
        self.batch += 1;
        self.emitted_in_batch = 0;
        self.stats.refills += 1;
    }

    /// Emits one item if the deadline has passed.
    ///
    /// On emission (or on an idle tick without cover) the next deadline is
    /// `now + fresh interval`.
    pub fn next_emission(
        &mut self,
        now: Nanos,
        make_cover: &mut dyn FnMut() -> Option<QueueItem>,
    ) -> Option<Emission> {
        if now < self.deadline {
            return None;
        }
        self.refill(make_cover);
        self.deadline = now + sample_interval(&self.config, &mut self.rng);
        let occupancy = self.outbox.len();
        let Some(slot) = self.outbox.pop_front() else {
            self.stats.idle_ticks += 1;
            return None;
        };
        let emitted_index = self.emitted_in_batch;
        self.emitted_in_batch += 1;
        self.stats.emitted += 1;
        if slot.item.kind == ItemKind::Cover {
            self.stats.emitted_cover += 1;
        }
        Some(Emission {
            item: slot.item,
            occupancy,
            batch: self.batch,
            queued_index: slot.queued_index,
            emitted_index,
            next_deadline: self.deadline,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn item(tag: u8, kind: ItemKind) -> QueueItem {
        let mut bytes = vec![0u8; crate::onion::PACKET_LEN];
        bytes[0] = tag;
        QueueItem::new(kind, OnionPacket::from_vec(bytes).unwrap(), NodeId(u32::from(tag)))
    }

    fn cover_source() -> impl FnMut() -> Option<QueueItem> {
        || Some(item(0xCC, ItemKind::Cover))
    }

    #[test]
    fn config_validation() {
        assert!(MixConfig::new(0, 0.005, 0.001).is_err());
        assert!(MixConfig::new(1, 0.0, 0.001).is_err());
        assert!(MixConfig::new(1, 0.005, -1.0).is_err());
        assert!(MixConfig::new(1, 0.005, 0.0).is_ok());
    }

    #[test]
    fn enqueue_is_fifo_and_leaves_outbox_alone() {
        let mut m = Mixer::new(MixConfig::default(), 1, Nanos::ZERO);
        m.enqueue(item(1, ItemKind::Real));
        m.enqueue(item(2, ItemKind::Real));
        let tags: Vec<u8> = m.queued().map(|i| i.packet.as_bytes()[0]).collect();
        assert_eq!(tags, [1, 2]);
        assert_eq!(m.outbox_len(), 0);
        for i in 0..998 {
            m.enqueue(item(i as u8, ItemKind::Relay));
        }
        assert_eq!(m.queue_len(), 1000);
    }

    #[test]
    fn refill_pads_with_cover() {
        let mut m = Mixer::new(MixConfig::default(), 2, Nanos::ZERO);
        for t in 0..3 {
            m.enqueue(item(t, ItemKind::Real));
        }
        m.refill(&mut cover_source());
        assert_eq!(m.outbox_len(), 10);
        assert_eq!(m.outbox().filter(|i| i.kind == ItemKind::Cover).count(), 7);
        assert_eq!(m.queue_len(), 0);
    }

    #[test]
    fn refill_takes_exactly_o_in_fifo_order() {
        let mut m = Mixer::new(MixConfig::default(), 3, Nanos::ZERO);
        for t in 0..15 {
            m.enqueue(item(t, ItemKind::Real));
        }
        m.refill(&mut cover_source());
        assert_eq!(m.outbox_len(), 10);
        let rest: Vec<u8> = m.queued().map(|i| i.packet.as_bytes()[0]).collect();
        assert_eq!(rest, [10, 11, 12, 13, 14]);
        let mut taken: Vec<u8> = m.outbox().map(|i| i.packet.as_bytes()[0]).collect();
        taken.sort_unstable();
        assert_eq!(taken, (0..10).collect::<Vec<u8>>());
    }

    #[test]
    fn degenerate_interval() {
        let cfg = MixConfig::new(10, 0.005, 0.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..100 {
            assert_eq!(sample_interval_secs(&cfg, &mut rng), 0.005);
        }
    }

    #[test]
    fn heavy_truncation_stays_positive() {
        let cfg = MixConfig::new(10, 0.001, 1.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        assert!((0..10_000).all(|_| sample_interval_secs(&cfg, &mut rng) > 0.0));
    }

    #[test]
    fn no_emission_before_deadline() {
        let mut m = Mixer::new(MixConfig::default(), 6, Nanos::ZERO);
        let d = m.deadline();
        assert!(m.next_emission(Nanos(d.0 - 1), &mut cover_source()).is_none());
        let e = m.next_emission(d, &mut cover_source()).unwrap();
        assert_eq!(e.item.kind, ItemKind::Cover);
        assert_eq!(e.occupancy, 10);
        assert!(e.next_deadline > d);
        assert_eq!(m.deadline(), e.next_deadline);
    }

    #[test]
    fn without_cover_idle_ticks_emit_nothing() {
        let cfg = MixConfig {
            cover: false,
            ..MixConfig::default()
        };
        let mut m = Mixer::new(cfg, 7, Nanos::ZERO);
        let d = m.deadline();
        assert!(m.next_emission(d, &mut cover_source()).is_none());
        assert_eq!(m.stats().idle_ticks, 1);
        m.enqueue(item(1, ItemKind::Real));
        let e = m.next_emission(m.deadline(), &mut cover_source()).unwrap();
        assert_eq!(e.occupancy, 1);
    }

    #[test]
    fn unshuffled_batches_keep_queue_order() {
        let cfg = MixConfig {
            shuffle: false,
            ..MixConfig::default()
        };
        let mut m = Mixer::new(cfg, 8, Nanos::ZERO);
        for t in 0..10 {
            m.enqueue(item(t, ItemKind::Real));
        }
        for _ in 0..10 {
            let e = m.next_emission(m.deadline(), &mut cover_source()).unwrap();
            assert_eq!(e.queued_index, e.emitted_index);
        }
    }

    #[test]
    fn purge_removes_matching() {
        let mut m = Mixer::new(MixConfig::default(), 9, Nanos::ZERO);
        for t in 0..12 {
            m.enqueue(item(t, ItemKind::Real));
        }
        m.refill(&mut cover_source());
        assert_eq!(m.purge(|i| i.first_hop.0 % 2 == 0), 6);
        assert_eq!(m.outbox_len() + m.queue_len(), 6);
    }
}
