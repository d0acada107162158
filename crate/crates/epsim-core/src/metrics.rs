//! Traffic accounting: every byte a pipeline moves lands in exactly one
//! (phase, class) cell, attributed to the rank that issued the operation,
//! with a parallel (class, source, destination) breakdown for conservation
//! checks.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Pipeline stages used for attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Layout,
    Notify,
    Dispatch,
    Expert,
    Combine,
}

pub const PHASES: [Phase; 5] = [
    Phase::Layout,
    Phase::Notify,
    Phase::Dispatch,
    Phase::Expert,
    Phase::Combine,
];
pub const NUM_PHASES: usize = 5;

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::Layout => 0,
            Phase::Notify => 1,
            Phase::Dispatch => 2,
            Phase::Expert => 3,
            Phase::Combine => 4,
        }
    }

    pub fn from_index(i: usize) -> Phase {
        PHASES[i]
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Layout => "layout",
            Phase::Notify => "notify",
            Phase::Dispatch => "dispatch",
            Phase::Expert => "expert",
            Phase::Combine => "combine",
        }
    }
}

/// What kind of traffic a byte is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrafficClass {
    /// Routed rows written into or read from expert windows directly.
    Payload,
    /// Counts, flags, and exchanged addresses.
    Control,
    /// Bytes that exist only because of an intermediate relay hop.
    Relay,
    /// Local pack/staging copies that never leave the source rank.
    LocalStaging,
}

pub const CLASSES: [TrafficClass; 4] = [
    TrafficClass::Payload,
    TrafficClass::Control,
    TrafficClass::Relay,
    TrafficClass::LocalStaging,
];
pub const NUM_CLASSES: usize = 4;

impl TrafficClass {
    pub fn index(self) -> usize {
        match self {
            TrafficClass::Payload => 0,
            TrafficClass::Control => 1,
            TrafficClass::Relay => 2,
            TrafficClass::LocalStaging => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TrafficClass::Payload => "payload",
            TrafficClass::Control => "control",
            TrafficClass::Relay => "relay",
            TrafficClass::LocalStaging => "local_staging",
        }
    }
}

#[derive(Default)]
struct RankSink {
    write_bytes: [[AtomicU64; NUM_CLASSES]; NUM_PHASES],
    read_bytes: [[AtomicU64; NUM_CLASSES]; NUM_PHASES],
    handshake_events: [AtomicU64; NUM_PHASES],
    relay_occupancy: AtomicU64,
    relay_peak: [AtomicU64; NUM_PHASES],
}

/// Lock-free counters the pool and pipelines write into while running.
pub struct MetricsSink {
    num_ranks: usize,
    ranks: Vec<RankSink>,
    sync_events: [AtomicU64; NUM_PHASES],
    // [class][src][dst] and [class][reader][owner], flattened.
    pair_write: Vec<AtomicU64>,
    pair_read: Vec<AtomicU64>,
}

impl MetricsSink {
    pub fn new(num_ranks: usize) -> Self {
        let pairs = NUM_CLASSES * num_ranks * num_ranks;
        MetricsSink {
            num_ranks,
            ranks: (0..num_ranks).map(|_| RankSink::default()).collect(),
            sync_events: Default::default(),
            pair_write: (0..pairs).map(|_| AtomicU64::new(0)).collect(),
            pair_read: (0..pairs).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn pair_idx(&self, class: TrafficClass, a: usize, b: usize) -> usize {
        (class.index() * self.num_ranks + a) * self.num_ranks + b
    }

    pub fn credit_write(
        &self,
        src: usize,
        dst: usize,
        phase: Phase,
        class: TrafficClass,
        bytes: u64,
    ) {
        self.ranks[src].write_bytes[phase.index()][class.index()]
            .fetch_add(bytes, Ordering::Relaxed);
        self.pair_write[self.pair_idx(class, src, dst)].fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn credit_read(
        &self,
        reader: usize,
        owner: usize,
        phase: Phase,
        class: TrafficClass,
        bytes: u64,
    ) {
        self.ranks[reader].read_bytes[phase.index()][class.index()]
            .fetch_add(bytes, Ordering::Relaxed);
        self.pair_read[self.pair_idx(class, reader, owner)].fetch_add(bytes, Ordering::Relaxed);
    }

    /// One collective or point-to-point synchronizing event.
    pub fn add_sync_event(&self, phase: Phase) {
        self.sync_events[phase.index()].fetch_add(1, Ordering::Relaxed);
    }

    /// One address-exchange round performed by `rank`.
    pub fn add_handshake(&self, rank: usize, phase: Phase) {
        self.ranks[rank].handshake_events[phase.index()].fetch_add(1, Ordering::Relaxed);
    }

    /// Bytes became resident in `rank`'s relay region.
    pub fn relay_occupy(&self, rank: usize, phase: Phase, bytes: u64) {
        let sink = &self.ranks[rank];
        let now = sink.relay_occupancy.fetch_add(bytes, Ordering::Relaxed) + bytes;
        sink.relay_peak[phase.index()].fetch_max(now, Ordering::Relaxed);
    }

    /// The relay region on `rank` was drained back to empty.
    pub fn relay_drain(&self, rank: usize) {
        self.ranks[rank].relay_occupancy.store(0, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsReport {
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let grid = |src: &[AtomicU64]| {
            CLASSES
                .iter()
                .map(|&c| {
                    (0..self.num_ranks)
                        .map(|a| {
                            (0..self.num_ranks)
                                .map(|b| load(&src[self.pair_idx(c, a, b)]))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        MetricsReport {
            num_ranks: self.num_ranks,
            ranks: self
                .ranks
                .iter()
                .map(|r| RankMetrics {
                    write_bytes: r.write_bytes.each_ref().map(|row| row.each_ref().map(load)),
                    read_bytes: r.read_bytes.each_ref().map(|row| row.each_ref().map(load)),
                    handshake_events: r.handshake_events.each_ref().map(load),
                    relay_peak_bytes: r.relay_peak.each_ref().map(load),
                })
                .collect(),
            sync_events: self.sync_events.each_ref().map(load),
            pair_write_bytes: grid(&self.pair_write),
            pair_read_bytes: grid(&self.pair_read),
        }
    }
}

/// One rank's share of the traffic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub write_bytes: [[u64; NUM_CLASSES]; NUM_PHASES],
    pub read_bytes: [[u64; NUM_CLASSES]; NUM_PHASES],
    pub handshake_events: [u64; NUM_PHASES],
    pub relay_peak_bytes: [u64; NUM_PHASES],
}

/// Immutable snapshot of a finished (or in-flight) run's traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_ranks: usize,
    pub ranks: Vec<RankMetrics>,
    /// Synchronizing events per phase; a barrier counts once for the world.
    pub sync_events: [u64; NUM_PHASES],
    /// [class][src][dst] write bytes.
    pub pair_write_bytes: Vec<Vec<Vec<u64>>>,
    /// [class][reader][owner] read bytes.
    pub pair_read_bytes: Vec<Vec<Vec<u64>>>,
}

impl MetricsReport {
    pub fn write_bytes(&self, phase: Phase, class: TrafficClass) -> u64 {
        self.ranks
            .iter()
            .map(|r| r.write_bytes[phase.index()][class.index()])
            .sum()
    }

    pub fn read_bytes(&self, phase: Phase, class: TrafficClass) -> u64 {
        self.ranks
            .iter()
            .map(|r| r.read_bytes[phase.index()][class.index()])
            .sum()
    }

    pub fn class_write_bytes(&self, class: TrafficClass) -> u64 {
        PHASES.iter().map(|&p| self.write_bytes(p, class)).sum()
    }

    pub fn class_read_bytes(&self, class: TrafficClass) -> u64 {
        PHASES.iter().map(|&p| self.read_bytes(p, class)).sum()
    }

    pub fn total_write_bytes(&self) -> u64 {
        CLASSES.iter().map(|&c| self.class_write_bytes(c)).sum()
    }

    pub fn total_read_bytes(&self) -> u64 {
        CLASSES.iter().map(|&c| self.class_read_bytes(c)).sum()
    }

    pub fn sync_events_total(&self) -> u64 {
        self.sync_events.iter().sum()
    }

    pub fn handshake_events(&self, phase: Phase) -> u64 {
        self.ranks
            .iter()
            .map(|r| r.handshake_events[phase.index()])
            .sum()
    }

    pub fn handshake_events_total(&self) -> u64 {
        PHASES.iter().map(|&p| self.handshake_events(p)).sum()
    }

    /// Largest relay residency seen on any rank during `phase`.
    pub fn relay_peak_in(&self, phase: Phase) -> u64 {
        self.ranks
            .iter()
            .map(|r| r.relay_peak_bytes[phase.index()])
            .max()
            .unwrap_or(0)
    }

    pub fn relay_peak_max(&self) -> u64 {
        PHASES
            .iter()
            .map(|&p| self.relay_peak_in(p))
            .max()
            .unwrap_or(0)
    }

    /// Bytes that touch payload data on the dispatch/combine critical path:
    /// payload + relay classes, reads and writes, over those two phases.
    /// Local staging copies are excluded.
    pub fn payload_touch_bytes(&self) -> u64 {
        [Phase::Dispatch, Phase::Combine]
            .iter()
            .map(|&p| {
                self.write_bytes(p, TrafficClass::Payload)
                    + self.read_bytes(p, TrafficClass::Payload)
                    + self.write_bytes(p, TrafficClass::Relay)
                    + self.read_bytes(p, TrafficClass::Relay)
            })
            .sum()
    }

    /// Checks the two accounting views agree: per-(class, src, dst) totals
    /// must sum to the same bytes as the per-(phase, class) cells.
    pub fn check_conservation(&self) -> Result<()> {
        for &class in &CLASSES {
            let ci = class.index();
            let pair_w: u64 = self.pair_write_bytes[ci]
                .iter()
                .flat_map(|row| row.iter())
                .sum();
            let pair_r: u64 = self.pair_read_bytes[ci]
                .iter()
                .flat_map(|row| row.iter())
                .sum();
            let cell_w = self.class_write_bytes(class);
            let cell_r = self.class_read_bytes(class);
            if pair_w != cell_w || pair_r != cell_r {
                return Err(SimError::InvalidConfig(format!(
                    "accounting mismatch for {}: pair view {pair_w}/{pair_r} vs cell view {cell_w}/{cell_r}",
                    class.label()
                )));
            }
        }
        Ok(())
    }
}

/// a/b with the conventions comparisons need: 0/0 is 1 (nothing changed),
/// 0/x is 0 (fully eliminated), x/0 is infinite.
pub fn byte_ratio(a: u64, b: u64) -> f64 {
    match (a, b) {
        (0, 0) => 1.0,
        (_, 0) => f64::INFINITY,
        (a, b) => a as f64 / b as f64,
    }
}

/// Cell-by-cell comparison of two runs (conventionally: a = candidate,
/// b = baseline).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonSummary {
    /// Combined write+read ratio per (phase, class).
    pub byte_ratio: [[f64; NUM_CLASSES]; NUM_PHASES],
    /// Combined write+read delta (a - b) per (phase, class).
    pub byte_delta: [[i64; NUM_CLASSES]; NUM_PHASES],
    /// a's payload-touch bytes over b's.
    pub payload_touch_ratio: f64,
    /// Relay-class bytes (all phases, W+R), a over b.
    pub relay_ratio: f64,
    /// Combine-phase handshake events, a - b.
    pub combine_handshake_delta: i64,
    /// True when a moves zero relay bytes while b moves some.
    pub relay_eliminated: bool,
    /// True when a performs fewer combine-phase handshakes than b.
    pub handshake_reduced: bool,
}

pub fn compare(a: &MetricsReport, b: &MetricsReport) -> ComparisonSummary {
    let mut byte_ratio_grid = [[0.0f64; NUM_CLASSES]; NUM_PHASES];
    let mut byte_delta = [[0i64; NUM_CLASSES]; NUM_PHASES];
    for &p in &PHASES {
        for &c in &CLASSES {
            let av = a.write_bytes(p, c) + a.read_bytes(p, c);
            let bv = b.write_bytes(p, c) + b.read_bytes(p, c);
            byte_ratio_grid[p.index()][c.index()] = byte_ratio(av, bv);
            byte_delta[p.index()][c.index()] = av as i64 - bv as i64;
        }
    }
    let relay_a = a.class_write_bytes(TrafficClass::Relay) + a.class_read_bytes(TrafficClass::Relay);
    let relay_b = b.class_write_bytes(TrafficClass::Relay) + b.class_read_bytes(TrafficClass::Relay);
    let hs_a = a.handshake_events(Phase::Combine) as i64;
    let hs_b = b.handshake_events(Phase::Combine) as i64;
    ComparisonSummary {
        byte_ratio: byte_ratio_grid,
        byte_delta,
        payload_touch_ratio: byte_ratio(a.payload_touch_bytes(), b.payload_touch_bytes()),
        relay_ratio: byte_ratio(relay_a, relay_b),
        combine_handshake_delta: hs_a - hs_b,
        relay_eliminated: relay_a == 0 && relay_b > 0,
        handshake_reduced: hs_a < hs_b,
    }
}
