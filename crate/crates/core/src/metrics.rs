//! Evaluation quantities computed from a finished [`GlobalLedger`], and their
//! aggregation over replications with Student-t confidence intervals.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::engine::{GlobalLedger, MacKind, RunConfig};
use crate::error::Result;
use crate::scenario::VehicleId;
use crate::time::SimTime;

/// Neighbors tracked by the delay metric.
pub const DELAY_RANKS: usize = 5;
/// Concurrency bins: 0, 1, 2, 3 and 4 or more.
pub const SHARING_BINS: usize = 5;

/// Mean over transmitters with at least one target of the fraction of
/// targets that received a committed reservation.
pub fn scheduled_ratio(ledger: &GlobalLedger) -> Option<f64> {
    let ratios: Vec<f64> = ledger
        .transmitters
        .iter()
        .filter(|t| !t.targets.is_empty())
        .map(|t| {
            let served: BTreeSet<VehicleId> = ledger
                .involving(t.id)
                .filter(|e| e.reservation.tx == t.id)
                .map(|e| e.reservation.rx)
                .filter(|rx| t.targets.contains(rx))
                .collect();
            served.len() as f64 / t.targets.len() as f64
        })
        .collect();
    mean(&ratios)
}

/// Like [`scheduled_ratio`] but counting only grants of the first cycle
/// (reference MAC only).
pub fn first_cycle_ratio(ledger: &GlobalLedger) -> Option<f64> {
    let ratios: Vec<f64> = ledger
        .transmitters
        .iter()
        .filter(|t| !t.targets.is_empty())
        .map(|t| {
            let served = ledger
                .involving(t.id)
                .filter(|e| e.reservation.tx == t.id && e.cycle == Some(0))
                .count();
            served as f64 / t.targets.len() as f64
        })
        .collect();
    mean(&ratios)
}

/// Per transmitter, the delays from activation to the start of its 1st..5th
/// transmission (ms). Entry `n - 1` holds the samples for rank `n`.
pub fn delay_to_nth(ledger: &GlobalLedger) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); DELAY_RANKS];
    for t in &ledger.transmitters {
        let mut starts: Vec<SimTime> = ledger
            .involving(t.id)
            .filter(|e| e.reservation.tx == t.id)
            .map(|e| e.reservation.start)
            .collect();
        starts.sort_unstable();
        for (n, s) in starts.into_iter().take(DELAY_RANKS).enumerate() {
            out[n].push((s - t.activated_at).as_millis_f64());
        }
    }
    out
}

/// Mean increase of the delay from one scheduled neighbor to the next,
/// pooled over transmitters and ranks.
pub fn mean_delay_increment(ledger: &GlobalLedger) -> Option<f64> {
    let mut incs = Vec::new();
    for t in &ledger.transmitters {
        let mut starts: Vec<SimTime> = ledger
            .involving(t.id)
            .filter(|e| e.reservation.tx == t.id)
            .map(|e| e.reservation.start)
            .collect();
        starts.sort_unstable();
        starts.truncate(DELAY_RANKS);
        incs.extend(starts.windows(2).map(|w| (w[1] - w[0]).as_millis_f64()));
    }
    mean(&incs)
}

/// Time (µs) spent at each concurrency level inside `[from, to)`.
pub fn sharing_times(intervals: &[(SimTime, SimTime)], from: SimTime, to: SimTime) -> [i64; SHARING_BINS] {
    let mut bins = [0i64; SHARING_BINS];
    if to <= from {
        return bins;
    }
    let mut edges: Vec<(SimTime, i32)> = Vec::with_capacity(intervals.len() * 2);
    for &(s, e) in intervals {
        let (s, e) = (s.max(from), e.min(to));
        if s < e {
            edges.push((s, 1));
            edges.push((e, -1));
        }
    }
    // Ends sort before starts at the same instant: intervals are half-open.
    edges.sort_unstable();
    let mut level = 0i32;
    let mut cursor = from;
    for (t, d) in edges {
        bins[(level as usize).min(SHARING_BINS - 1)] += (t - cursor).as_micros();
        cursor = t;
        level += d;
    }
    bins[0] += (to - cursor).as_micros();
    bins
}

/// Fraction of the window from the first activation to the last reservation
/// end with exactly k concurrent transmissions. With an empty window all the
/// mass sits at k = 0.
pub fn sharing_histogram(ledger: &GlobalLedger) -> [f64; SHARING_BINS] {
    let (from, to) = sharing_window(ledger);
    let intervals: Vec<(SimTime, SimTime)> = ledger.reservations().map(|r| (r.start, r.end)).collect();
    let bins = sharing_times(&intervals, from, to);
    let total = (to - from).as_micros();
    let mut h = [0.0; SHARING_BINS];
    if total <= 0 {
        h[0] = 1.0;
        return h;
    }
    for (k, b) in bins.iter().enumerate() {
        h[k] = *b as f64 / total as f64;
    }
    h
}

pub fn sharing_window(ledger: &GlobalLedger) -> (SimTime, SimTime) {
    let from = ledger
        .transmitters
        .iter()
        .map(|t| t.activated_at)
        .min()
        .unwrap_or(SimTime::ZERO);
    let to = ledger.reservations().map(|r| r.end).max().unwrap_or(from).max(from);
    (from, to)
}

/// Control overhead in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Overhead {
    /// Mean bytes per transmitter scheduling round (transmitters with targets).
    pub per_round: f64,
    /// Total bytes divided by the number of served neighbors.
    pub per_neighbor: f64,
    pub total: u64,
    pub served_neighbors: u64,
    pub rounds: u64,
}

/// Control bytes attributable to scheduling. For the assisted MAC these are
/// the RTS entries a transmitter sent plus the CTS entries answering it; for
/// the reference MAC a fixed cost per served neighbor.
pub fn overhead_report(ledger: &GlobalLedger, mac: MacKind, bytes_per_neighbor: u64) -> Overhead {
    let mut rounds = 0u64;
    let mut total = 0u64;
    let mut served_total = 0u64;
    for t in ledger.transmitters.iter().filter(|t| !t.targets.is_empty()) {
        let served = ledger
            .involving(t.id)
            .filter(|e| e.reservation.tx == t.id)
            .map(|e| e.reservation.rx)
            .collect::<BTreeSet<_>>()
            .len() as u64;
        rounds += 1;
        served_total += served;
        total += match mac {
            MacKind::Assisted => ledger.round_bytes.get(&t.id).copied().unwrap_or(0),
            MacKind::RefAd => bytes_per_neighbor * served,
        };
    }
    Overhead {
        per_round: if rounds == 0 { 0.0 } else { total as f64 / rounds as f64 },
        per_neighbor: if served_total == 0 {
            0.0
        } else {
            total as f64 / served_total as f64
        },
        total,
        served_neighbors: served_total,
        rounds,
    }
}

/// Metrics of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub mac: MacKind,
    pub r_tx: f64,
    pub seed: u64,
    pub transmitters: usize,
    pub transmitters_with_targets: usize,
    pub mean_targets: f64,
    pub scheduled_ratio: Option<f64>,
    pub first_cycle_ratio: Option<f64>,
    pub delay_samples: Vec<Vec<f64>>,
    pub delay_increment: Option<f64>,
    /// Activation to first RTS, per transmitter that sent one (ms).
    pub first_rts_lag: Vec<f64>,
    pub sharing: [f64; SHARING_BINS],
    pub sharing_window_ms: f64,
    pub overhead: Overhead,
    pub control_time_fraction: f64,
    pub cbr_with: Option<f64>,
    pub cbr_base: Option<f64>,
    pub reservations: usize,
    pub los_failed: usize,
    pub conflicts: usize,
    pub expired_targets: usize,
    /// Extension bytes as counted by the beacon log.
    pub beacon_extension_bytes: u64,
}

impl ReplicationMetrics {
    pub fn compute(ledger: &GlobalLedger, cfg: &RunConfig) -> Self {
        let mac = cfg.run.mac;
        let with_targets: Vec<_> = ledger.transmitters.iter().filter(|t| !t.targets.is_empty()).collect();
        let (cbr_with, cbr_base) = match ledger.cbr {
            Some((w, b)) => (Some(w), Some(b)),
            None => (None, None),
        };
        ReplicationMetrics {
            mac,
            r_tx: cfg.run.r_tx,
            seed: 0,
            transmitters: ledger.transmitters.len(),
            transmitters_with_targets: with_targets.len(),
            mean_targets: mean(&with_targets.iter().map(|t| t.targets.len() as f64).collect::<Vec<_>>()).unwrap_or(0.0),
            scheduled_ratio: scheduled_ratio(ledger),
            first_cycle_ratio: match mac {
                MacKind::Assisted => None,
                MacKind::RefAd => first_cycle_ratio(ledger),
            },
            delay_samples: delay_to_nth(ledger),
            delay_increment: mean_delay_increment(ledger),
            first_rts_lag: ledger
                .transmitters
                .iter()
                .filter_map(|t| t.first_rts.map(|r| (r - t.activated_at).as_millis_f64()))
                .collect(),
            sharing: sharing_histogram(ledger),
            sharing_window_ms: {
                let (a, b) = sharing_window(ledger);
                (b - a).as_millis_f64()
            },
            overhead: overhead_report(ledger, mac, cfg.ad.control_bytes_per_neighbor),
            control_time_fraction: match mac {
                MacKind::Assisted => 0.0,
                MacKind::RefAd => cfg.ad.control_time_fraction(),
            },
            cbr_with,
            cbr_base,
            reservations: ledger.entries.len(),
            los_failed: ledger.entries.iter().filter(|e| e.los_failed).count(),
            conflicts: ledger.conflicts.len(),
            expired_targets: ledger.expired_targets,
            beacon_extension_bytes: ledger.beacon_log.extension_bytes(),
        }
    }

    pub fn cbr_delta(&self) -> Option<f64> {
        match (self.cbr_with, self.cbr_base) {
            (Some(w), Some(b)) if b > 0.0 => Some((w - b) / b),
            _ => None,
        }
    }

    pub fn mean_delay(&self, n: usize) -> Option<f64> {
        mean(&self.delay_samples[n - 1])
    }
}

/// Mean of replication values with the half-width of its 95% CI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        let m = mean(xs)?;
        let n = xs.len();
        let half_width = if n < 2 {
            f64::INFINITY
        } else {
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            if var == 0.0 {
                0.0
            } else {
                let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                    .expect("dof >= 1")
                    .inverse_cdf(0.975);
                t * (var / n as f64).sqrt()
            }
        };
        Some(Estimate { mean: m, half_width, n })
    }

    /// Half-width relative to the mean; zero when both are zero.
    pub fn relative_margin(&self) -> f64 {
        if self.half_width == 0.0 {
            0.0
        } else {
            self.half_width / self.mean.abs()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySummary {
    pub n: usize,
    pub samples: usize,
    pub mean: Option<f64>,
    pub p10: Option<f64>,
    pub p90: Option<f64>,
    pub min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mac: MacKind,
    pub r_tx: f64,
    pub replications: usize,
    pub mean_targets: f64,
    pub scheduled_ratio: Option<Estimate>,
    pub first_cycle_ratio: Option<f64>,
    /// Replication means of the delay to the first scheduled neighbor.
    pub delay_first: Option<Estimate>,
    pub delay_to_nth: Vec<DelaySummary>,
    pub delay_increment: Option<f64>,
    pub first_rts_lag_mean: Option<f64>,
    pub sharing_histogram: [f64; SHARING_BINS],
    pub sharing_idle: Option<Estimate>,
    pub control_overhead_bytes: f64,
    pub control_bytes_per_neighbor: f64,
    /// Reduction against the reference cost per neighbor, comparing per-neighbor bytes.
    pub reduction_per_neighbor: f64,
    /// Reduction comparing one scheduling round with one neighbor's reference cost.
    pub reduction_per_round: f64,
    pub control_time_fraction: f64,
    pub cbr_with: Option<f64>,
    pub cbr_base: Option<f64>,
    pub cbr_delta: Option<Estimate>,
    pub los_failed: usize,
    pub conflicts: usize,
    pub expired_targets: usize,
}

impl MetricsReport {
    /// Order-independent merge of replication metrics.
    pub fn aggregate(cfg: &RunConfig, reps: &[ReplicationMetrics]) -> Self {
        let collect =
            |f: &dyn Fn(&ReplicationMetrics) -> Option<f64>| -> Vec<f64> { reps.iter().filter_map(f).collect() };
        let delay_to_nth = (1..=DELAY_RANKS)
            .map(|n| {
                let mut pooled: Vec<f64> = reps
                    .iter()
                    .flat_map(|r| r.delay_samples[n - 1].iter().copied())
                    .collect();
                pooled.sort_by(f64::total_cmp);
                DelaySummary {
                    n,
                    samples: pooled.len(),
                    mean: mean(&pooled),
                    p10: quantile(&pooled, 0.1),
                    p90: quantile(&pooled, 0.9),
                    min: pooled.first().copied(),
                }
            })
            .collect();
        let mut sharing = [0.0; SHARING_BINS];
        for r in reps {
            for (k, x) in r.sharing.iter().enumerate() {
                sharing[k] += x / reps.len().max(1) as f64;
            }
        }
        let per_round = mean(&collect(&|r| Some(r.overhead.per_round))).unwrap_or(0.0);
        let total: u64 = reps.iter().map(|r| r.overhead.total).sum();
        let served: u64 = reps.iter().map(|r| r.overhead.served_neighbors).sum();
        let per_neighbor = if served == 0 { 0.0 } else { total as f64 / served as f64 };
        let reference = cfg.ad.control_bytes_per_neighbor as f64;
        let first_rts: Vec<f64> = reps.iter().flat_map(|r| r.first_rts_lag.iter().copied()).collect();
        MetricsReport {
            mac: cfg.run.mac,
            r_tx: cfg.run.r_tx,
            replications: reps.len(),
            mean_targets: mean(&collect(&|r| Some(r.mean_targets))).unwrap_or(0.0),
            scheduled_ratio: Estimate::from_samples(&collect(&|r| r.scheduled_ratio)),
            first_cycle_ratio: mean(&collect(&|r| r.first_cycle_ratio)),
            delay_first: Estimate::from_samples(&collect(&|r| r.mean_delay(1))),
            delay_to_nth,
            delay_increment: mean(&collect(&|r| r.delay_increment)),
            first_rts_lag_mean: mean(&first_rts),
            sharing_histogram: sharing,
            sharing_idle: Estimate::from_samples(&collect(&|r| Some(r.sharing[0]))),
            control_overhead_bytes: per_round,
            control_bytes_per_neighbor: per_neighbor,
            reduction_per_neighbor: 1.0 - per_neighbor / reference,
            reduction_per_round: 1.0 - per_round / reference,
            control_time_fraction: cfg_control_fraction(cfg),
            cbr_with: mean(&collect(&|r| r.cbr_with)),
            cbr_base: mean(&collect(&|r| r.cbr_base)),
            cbr_delta: Estimate::from_samples(&collect(&|r| r.cbr_delta())),
            los_failed: reps.iter().map(|r| r.los_failed).sum(),
            conflicts: reps.iter().map(|r| r.conflicts).sum(),
            expired_targets: reps.iter().map(|r| r.expired_targets).sum(),
        }
    }

    /// Whether the primary estimates are within `target` relative margin.
    pub fn meets_target(&self, target: f64) -> bool {
        [self.scheduled_ratio, self.delay_first]
            .iter()
            .all(|e| e.is_none_or(|e| e.relative_margin() <= target))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table_row(&self) -> ReportRow {
        let opt = |e: Option<Estimate>| e.map(|e| e.mean);
        let half = |e: Option<Estimate>| e.map(|e| e.half_width);
        ReportRow {
            mac: self.mac.as_str().to_string(),
            r_tx: self.r_tx,
            replications: self.replications,
            scheduled_ratio: opt(self.scheduled_ratio),
            scheduled_ratio_ci: half(self.scheduled_ratio),
            delay1_ms: opt(self.delay_first),
            delay1_ci_ms: half(self.delay_first),
            delay2_ms: self.delay_to_nth[1].mean,
            delay3_ms: self.delay_to_nth[2].mean,
            delay4_ms: self.delay_to_nth[3].mean,
            delay5_ms: self.delay_to_nth[4].mean,
            share_k0: self.sharing_histogram[0],
            share_k1: self.sharing_histogram[1],
            share_k2: self.sharing_histogram[2],
            share_k3: self.sharing_histogram[3],
            share_k4plus: self.sharing_histogram[4],
            overhead_round_bytes: self.control_overhead_bytes,
            overhead_neighbor_bytes: self.control_bytes_per_neighbor,
            reduction_per_neighbor: self.reduction_per_neighbor,
            reduction_per_round: self.reduction_per_round,
            control_time_fraction: self.control_time_fraction,
            cbr_delta: opt(self.cbr_delta),
        }
    }
}

fn cfg_control_fraction(cfg: &RunConfig) -> f64 {
    match cfg.run.mac {
        MacKind::Assisted => 0.0,
        MacKind::RefAd => cfg.ad.control_time_fraction(),
    }
}

/// Flat summary row of one (mac, r_tx) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub mac: String,
    pub r_tx: f64,
    pub replications: usize,
    pub scheduled_ratio: Option<f64>,
    pub scheduled_ratio_ci: Option<f64>,
    pub delay1_ms: Option<f64>,
    pub delay1_ci_ms: Option<f64>,
    pub delay2_ms: Option<f64>,
    pub delay3_ms: Option<f64>,
    pub delay4_ms: Option<f64>,
    pub delay5_ms: Option<f64>,
    pub share_k0: f64,
    pub share_k1: f64,
    pub share_k2: f64,
    pub share_k3: f64,
    pub share_k4plus: f64,
    pub overhead_round_bytes: f64,
    pub overhead_neighbor_bytes: f64,
    pub reduction_per_neighbor: f64,
    pub reduction_per_round: f64,
    pub control_time_fraction: f64,
    pub cbr_delta: Option<f64>,
}

/// Flat row per (mac, r_tx, replication).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRow {
    pub mac: String,
    pub r_tx: f64,
    pub replication: usize,
    pub seed: u64,
    pub transmitters: usize,
    pub scheduled_ratio: Option<f64>,
    pub delay1_ms: Option<f64>,
    pub delay_increment_ms: Option<f64>,
    pub share_k0: f64,
    pub share_k1: f64,
    pub share_k2: f64,
    pub share_k3: f64,
    pub share_k4plus: f64,
    pub overhead_round_bytes: f64,
    pub control_time_fraction: f64,
    pub cbr_delta: Option<f64>,
    pub los_failed: usize,
    pub conflicts: usize,
    pub expired_targets: usize,
}

impl ReplicationRow {
    pub fn new(k: usize, m: &ReplicationMetrics) -> Self {
        ReplicationRow {
            mac: m.mac.as_str().to_string(),
            r_tx: m.r_tx,
            replication: k,
            seed: m.seed,
            transmitters: m.transmitters,
            scheduled_ratio: m.scheduled_ratio,
            delay1_ms: m.mean_delay(1),
            delay_increment_ms: m.delay_increment,
            share_k0: m.sharing[0],
            share_k1: m.sharing[1],
            share_k2: m.sharing[2],
            share_k3: m.sharing[3],
            share_k4plus: m.sharing[4],
            overhead_round_bytes: m.overhead.per_round,
            control_time_fraction: m.control_time_fraction,
            cbr_delta: m.cbr_delta(),
            los_failed: m.los_failed,
            conflicts: m.conflicts,
            expired_targets: m.expired_targets,
        }
    }
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Nearest-rank quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}
