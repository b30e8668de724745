//! Per-run counters and the evaluation quantities derived from them:
//! handoff latency, throughput, packet loss and the new-node blocking and
//! handoff-node dropping probabilities.

use std::fmt;
use std::ops::Range;

use crate::addressing::MnClass;
use crate::Seconds;

/// A ratio that is undefined when nothing was attempted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        Self {
            numerator,
            denominator,
        }
    }

    pub fn value(&self) -> Option<f64> {
        (self.denominator > 0).then(|| self.numerator as f64 / self.denominator as f64)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{v:.6}"),
            None => f.write_str("n/a"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowStats {
    pub cn: String,
    pub mn: String,
    pub packet_size: u32,
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HandoffKind {
    Intra,
    Inter,
}

impl fmt::Display for HandoffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HandoffKind::Intra => f.write_str("intra"),
            HandoffKind::Inter => f.write_str("inter"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandoffRecord {
    pub mn: String,
    pub kind: HandoffKind,
    pub from_ar: String,
    pub to_ar: String,
    /// Time the node attached to the new access router.
    pub start: Seconds,
    /// Time the last acknowledgement of the handoff reached the node.
    pub end: Option<Seconds>,
    /// Sum of link latencies along the handoff's BU and BA paths.
    pub signaling_delay: Option<Seconds>,
    pub latency: Option<Seconds>,
    /// Set when the handoff ended with the node being dropped.
    pub dropped: bool,
}

/// How a registration chain ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChainOutcome {
    Pending,
    Accepted,
    Failed,
}

/// Why a node started registering with a MAP that does not know it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChainKind {
    /// Switch-on or re-entry after a drop.
    Initial,
    /// Movement into another MAP domain.
    Handoff,
    /// Re-homing after eviction by the replacement mechanism.
    Displaced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepResult {
    Accepted,
    AcceptedByReplacement,
    Rejected,
}

/// One registration chain: the first MAP, any replacement there, and any
/// MAPs tried through reselection, up to its terminal outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub mn: String,
    pub class: MnClass,
    pub kind: ChainKind,
    pub started: Seconds,
    pub steps: Vec<(String, StepResult)>,
    pub outcome: ChainOutcome,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub sim_time: Seconds,
    pub flows: Vec<FlowStats>,
    /// Delivery instants of every packet received by a mobile node, in
    /// time order.
    pub deliveries: Vec<Seconds>,
    /// Bytes of each delivered packet, parallel to `deliveries`.
    pub delivered_sizes: Vec<u32>,
    pub in_flight: u64,
    pub handoffs: Vec<HandoffRecord>,
    pub chains: Vec<ChainRecord>,
    pub insufficient_resource_acks: u64,
    pub adverts_emitted: u64,
    pub events_processed: u64,
}

impl MetricsReport {
    pub fn sent(&self) -> u64 {
        self.flows.iter().map(|f| f.sent).sum()
    }

    pub fn delivered(&self) -> u64 {
        self.flows.iter().map(|f| f.delivered).sum()
    }

    pub fn lost(&self) -> u64 {
        self.flows.iter().map(|f| f.lost).sum()
    }

    /// Lost over sent packets.
    pub fn packet_loss(&self) -> Ratio {
        Ratio::new(self.lost(), self.sent())
    }

    /// Mean over handoffs that produced a latency sample.
    pub fn mean_handoff_latency(&self) -> Option<Seconds> {
        let samples: Vec<f64> = self.handoffs.iter().filter_map(|h| h.latency).collect();
        (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64)
    }

    /// Delivered packets per one-second bucket.
    pub fn throughput_series(&self) -> Vec<u64> {
        let buckets = self.sim_time.ceil().max(0.0) as usize;
        let mut series = vec![0u64; buckets];
        for &t in &self.deliveries {
            let b = (t.floor() as usize).min(buckets.saturating_sub(1));
            if let Some(slot) = series.get_mut(b) {
                *slot += 1;
            }
        }
        series
    }

    pub fn conservation_holds(&self) -> bool {
        self.sent() == self.delivered() + self.lost() + self.in_flight
    }

    fn chain_ratio(&self, class: MnClass) -> Ratio {
        let (failed, total) = self
            .chains
            .iter()
            .filter(|c| c.class == class && c.outcome != ChainOutcome::Pending)
            .fold((0, 0), |(f, t), c| {
                (f + u64::from(c.outcome == ChainOutcome::Failed), t + 1)
            });
        Ratio::new(failed, total)
    }
}

/// Time between the last packet heard from the old access router and the
/// first one from the new. No sample without traffic on both sides.
pub fn record_handoff_latency(
    last_pkt_from_old: Option<Seconds>,
    first_pkt_from_new: Option<Seconds>,
) -> Option<Seconds> {
    let (last, first) = (last_pkt_from_old?, first_pkt_from_new?);
    debug_assert!(
        first >= last,
        "first packet from new AR precedes last from old"
    );
    Some(first - last)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Throughput {
    pub packets: u64,
    pub packets_per_s: f64,
    pub bits_per_s: f64,
}

/// Packets received by mobile nodes inside `window`.
pub fn throughput(report: &MetricsReport, window: Range<Seconds>) -> Throughput {
    let span = window.end - window.start;
    if !(span > 0.0) {
        return Throughput {
            packets: 0,
            packets_per_s: 0.0,
            bits_per_s: 0.0,
        };
    }
    let lo = report.deliveries.partition_point(|&t| t < window.start);
    let hi = report.deliveries.partition_point(|&t| t < window.end);
    let packets = (hi - lo) as u64;
    let bits: u64 = report.delivered_sizes[lo..hi]
        .iter()
        .map(|&b| u64::from(b) * 8)
        .sum();
    Throughput {
        packets,
        packets_per_s: packets as f64 / span,
        bits_per_s: bits as f64 / span,
    }
}

/// New-node blocking and handoff-node dropping probabilities. A chain only
/// counts as blocked or dropped if every MAP it tried turned it away.
pub fn probabilities(report: &MetricsReport) -> (Ratio, Ratio) {
    (
        report.chain_ratio(MnClass::New),
        report.chain_ratio(MnClass::Handoff),
    )
}
