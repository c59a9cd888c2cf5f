//! Sub-6GHz control plane: the periodic beacon train, the scheduling
//! extensions piggybacked on it, byte/airtime accounting and channel busy
//! ratio measurement.
//!
//! Delivery is idealized: every vehicle inside the sub-6GHz disc receives a
//! beacon instantly and without loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{ScenarioView, VehicleId};
use crate::time::SimTime;

/// Bytes of a neighbor MAC address in an extension entry.
pub const ENTRY_ID_BYTES: u32 = 6;
/// Bytes of the Tx. dur (RTS) or delay (CTS) field of an entry.
pub const ENTRY_FIELD_BYTES: u32 = 2;
pub const ENTRY_BYTES: u32 = ENTRY_ID_BYTES + ENTRY_FIELD_BYTES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sub6Config {
    pub beacon_period_ms: f64,
    pub data_rate_mbps: f64,
    /// Size of a beacon without any scheduling extension.
    pub base_beacon_bytes: u32,
    /// Informational only; delivery is a deterministic disc.
    pub tx_power_dbm: f64,
    /// Length of the CBR measurement window.
    pub cbr_window_ms: f64,
}

impl Default for Sub6Config {
    fn default() -> Self {
        Sub6Config {
            beacon_period_ms: 100.0,
            data_rate_mbps: 6.0,
            base_beacon_bytes: 300,
            tx_power_dbm: 15.0,
            cbr_window_ms: 1000.0,
        }
    }
}

impl Sub6Config {
    // written as !(x > 0) so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.beacon_period_ms > 0.0) {
            return Err(Error::config("beacon_period_ms must be > 0"));
        }
        if !(self.data_rate_mbps > 0.0) {
            return Err(Error::config("data_rate_mbps must be > 0"));
        }
        if !(self.cbr_window_ms > 0.0) {
            return Err(Error::config("cbr_window_ms must be > 0"));
        }
        Ok(())
    }

    pub fn beacon_period(&self) -> SimTime {
        SimTime::from_millis_f64(self.beacon_period_ms)
    }

    pub fn cbr_window(&self) -> SimTime {
        SimTime::from_millis_f64(self.cbr_window_ms)
    }

    /// On-air time of a frame of `bytes`, in microseconds.
    pub fn airtime_us(&self, bytes: u32) -> f64 {
        bytes as f64 * 8.0 / self.data_rate_mbps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtsEntry {
    pub neighbor: VehicleId,
    pub tx_dur: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtsEntry {
    pub transmitter: VehicleId,
    /// Start offset relative to the CTS beacon instant.
    pub delay: SimTime,
}

/// Scheduling request: the neighbors a transmitter wants to reach and for how long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtsExtension {
    entries: Vec<RtsEntry>,
}

impl RtsExtension {
    pub fn new(entries: Vec<RtsEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("RTS extension needs at least one entry"));
        }
        if entries.iter().any(|e| e.tx_dur <= SimTime::ZERO) {
            return Err(Error::config("RTS tx_dur must be > 0"));
        }
        if has_duplicates(entries.iter().map(|e| e.neighbor)) {
            return Err(Error::config("RTS neighbor ids must be distinct"));
        }
        Ok(RtsExtension { entries })
    }

    pub fn entries(&self) -> &[RtsEntry] {
        &self.entries
    }
}

/// Scheduling grant: for each requesting transmitter, when its transmission
/// to the beacon sender may start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtsExtension {
    entries: Vec<CtsEntry>,
}

impl CtsExtension {
    pub fn new(entries: Vec<CtsEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::config("CTS extension needs at least one entry"));
        }
        if entries.iter().any(|e| e.delay < SimTime::ZERO) {
            return Err(Error::config("CTS delay must be >= 0"));
        }
        if has_duplicates(entries.iter().map(|e| e.transmitter)) {
            return Err(Error::config("CTS transmitter ids must be distinct"));
        }
        Ok(CtsExtension { entries })
    }

    pub fn entries(&self) -> &[CtsEntry] {
        &self.entries
    }
}

fn has_duplicates(ids: impl Iterator<Item = VehicleId>) -> bool {
    let mut v: Vec<VehicleId> = ids.collect();
    let n = v.len();
    v.sort_unstable();
    v.dedup();
    v.len() != n
}

/// A beacon carries at most one kind of scheduling extension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extension {
    None,
    Rts(RtsExtension),
    Cts(CtsExtension),
}

impl Extension {
    pub fn kind(&self) -> &'static str {
        match self {
            Extension::None => "none",
            Extension::Rts(_) => "rts",
            Extension::Cts(_) => "cts",
        }
    }

    pub fn entry_count(&self) -> usize {
        match self {
            Extension::None => 0,
            Extension::Rts(r) => r.entries.len(),
            Extension::Cts(c) => c.entries.len(),
        }
    }

    pub fn bytes(&self) -> u32 {
        self.entry_count() as u32 * ENTRY_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    pub longitudinal_pos: f64,
    pub lane: usize,
    pub speed: f64,
    /// Radians; every vehicle drives along +x on the ring.
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beacon {
    pub sender: VehicleId,
    pub tx_time: SimTime,
    pub kinematics: Kinematics,
    pub extension: Extension,
}

impl Beacon {
    pub fn new(view: &ScenarioView<'_>, sender: VehicleId, tx_time: SimTime, extension: Extension) -> Self {
        let v = view.state().vehicle(sender);
        Beacon {
            sender,
            tx_time,
            kinematics: Kinematics {
                longitudinal_pos: view.position(sender),
                lane: v.lane,
                speed: v.speed,
                heading: 0.0,
                length: v.length,
                width: v.width,
            },
            extension,
        }
    }
}

/// Smallest `t >= now` with `t ≡ phase (mod period)`.
pub fn next_beacon_time(phase: SimTime, period: SimTime, now: SimTime) -> SimTime {
    let offset = (phase - now).rem_euclid(period);
    now + offset
}

pub fn beacon_bytes(beacon: &Beacon, cfg: &Sub6Config) -> u32 {
    cfg.base_beacon_bytes + beacon.extension.bytes()
}

/// Vehicles that receive `beacon`: everyone inside the sub-6GHz disc of the
/// sender at the transmission instant.
pub fn deliver_beacon(beacon: &Beacon, view: &ScenarioView<'_>) -> Vec<VehicleId> {
    view.sub6_neighbors(beacon.sender)
}

/// One row of the beacon log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeaconRecord {
    pub time_ms: f64,
    pub sender: u32,
    pub extension_kind: String,
    pub entry_count: usize,
    pub bytes: u32,
    pub recipients_count: usize,
}

/// Append-only log of transmitted beacons.
#[derive(Debug, Clone, Default)]
pub struct BeaconLog {
    records: Vec<BeaconRecord>,
    extension_bytes: u64,
}

impl BeaconLog {
    pub fn push(&mut self, beacon: &Beacon, bytes: u32, recipients: usize) {
        self.extension_bytes += beacon.extension.bytes() as u64;
        self.records.push(BeaconRecord {
            time_ms: beacon.tx_time.as_millis_f64(),
            sender: beacon.sender.0,
            extension_kind: beacon.extension.kind().to_string(),
            entry_count: beacon.extension.entry_count(),
            bytes,
            recipients_count: recipients,
        });
    }

    pub fn records(&self) -> &[BeaconRecord] {
        &self.records
    }

    /// Sum of scheduling-extension bytes over all logged beacons.
    pub fn extension_bytes(&self) -> u64 {
        self.extension_bytes
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A delivered beacon as seen by the CBR estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub sender: VehicleId,
    pub tx_time: SimTime,
    pub airtime_us: f64,
    pub recipients: Vec<VehicleId>,
}

/// Fraction of `[window_start, window_start + window)` covered by the union of
/// the busy intervals `(start_us, airtime_us)`.
pub fn busy_fraction(intervals: &mut [(f64, f64)], window_start: SimTime, window: SimTime) -> f64 {
    assert!(window > SimTime::ZERO, "CBR window must be > 0");
    let w0 = window_start.as_micros() as f64;
    let w1 = w0 + window.as_micros() as f64;
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut busy = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for &(s, d) in intervals.iter() {
        let (s, e) = (s.max(w0), (s + d).min(w1));
        if e <= s {
            continue;
        }
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                busy += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        busy += ce - cs;
    }
    busy / (w1 - w0)
}

/// Channel busy ratio at `v`: share of the window during which a beacon
/// audible at `v` (or sent by `v`) is on the air.
pub fn cbr(v: VehicleId, window_start: SimTime, window: SimTime, log: &[Delivery]) -> f64 {
    let mut intervals: Vec<(f64, f64)> = log
        .iter()
        .filter(|d| d.sender == v || d.recipients.contains(&v))
        .map(|d| (d.tx_time.as_micros() as f64, d.airtime_us))
        .collect();
    busy_fraction(&mut intervals, window_start, window)
}

/// Streaming CBR accumulator for one fixed window. Each beacon's airtime is
/// recorded twice: with its actual size and with the extension stripped, so
/// the with/without-extension comparison shares topology and timing.
#[derive(Debug, Clone)]
pub struct CbrMeter {
    window_start: SimTime,
    window: SimTime,
    with_ext: Vec<Vec<(f64, f64)>>,
    base_only: Vec<Vec<(f64, f64)>>,
}

impl CbrMeter {
    pub fn new(vehicles: usize, window_start: SimTime, window: SimTime) -> Self {
        CbrMeter {
            window_start,
            window,
            with_ext: vec![Vec::new(); vehicles],
            base_only: vec![Vec::new(); vehicles],
        }
    }

    pub fn window_start(&self) -> SimTime {
        self.window_start
    }

    pub fn window_end(&self) -> SimTime {
        self.window_start + self.window
    }

    pub fn record(
        &mut self,
        sender: VehicleId,
        recipients: &[VehicleId],
        tx_time: SimTime,
        airtime_us: f64,
        base_airtime_us: f64,
    ) {
        let t = tx_time.as_micros() as f64;
        let w0 = self.window_start.as_micros() as f64;
        let w1 = self.window_end().as_micros() as f64;
        if t + airtime_us <= w0 || t >= w1 {
            return;
        }
        for &v in std::iter::once(&sender).chain(recipients) {
            self.with_ext[v.index()].push((t, airtime_us));
            self.base_only[v.index()].push((t, base_airtime_us));
        }
    }

    /// Population-mean CBR with and without the scheduling extensions.
    pub fn mean_cbr(&self) -> (f64, f64) {
        let n = self.with_ext.len().max(1) as f64;
        let mean = |lists: &Vec<Vec<(f64, f64)>>| {
            lists
                .iter()
                .map(|l| busy_fraction(&mut l.clone(), self.window_start, self.window))
                .sum::<f64>()
                / n
        };
        (mean(&self.with_ext), mean(&self.base_only))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{RoadGeometry, ScenarioState, VehicleState};

    fn ms(x: i64) -> SimTime {
        SimTime::from_millis(x)
    }

    fn state(positions: &[f64]) -> ScenarioState {
        let vehicles = positions
            .iter()
            .enumerate()
            .map(|(i, &x)| VehicleState {
                id: VehicleId(i as u32),
                lane: 0,
                longitudinal_pos: x,
                speed: 0.0,
                length: 5.0,
                width: 2.0,
                is_mmwave_tx: false,
                beacon_phase: SimTime::ZERO,
            })
            .collect();
        let geo = RoadGeometry {
            road_length: 4000.0,
            lane_width: 3.5,
            mmwave_los_range: 80.0,
            sub6_range: 300.0,
        };
        ScenarioState::new(SimTime::ZERO, geo, vehicles).unwrap()
    }

    fn rts(n: u32) -> Extension {
        Extension::Rts(
            RtsExtension::new(
                (0..n)
                    .map(|i| RtsEntry {
                        neighbor: VehicleId(i + 1),
                        tx_dur: ms(50),
                    })
                    .collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn next_beacon_examples() {
        assert_eq!(next_beacon_time(ms(10), ms(100), ms(0)), ms(10));
        assert_eq!(next_beacon_time(ms(10), ms(100), ms(10)), ms(10));
        assert_eq!(next_beacon_time(ms(70), ms(100), ms(121)), ms(170));
        assert_eq!(next_beacon_time(ms(0), ms(100), ms(100)), ms(100));
    }

    #[test]
    fn beacon_sizes() {
        let s = state(&[0.0, 10.0]);
        let view = s.view_at(SimTime::ZERO);
        let cfg = Sub6Config::default();
        let plain = Beacon::new(&view, VehicleId(0), ms(10), Extension::None);
        assert_eq!(beacon_bytes(&plain, &cfg), 300);
        let with_rts = Beacon::new(&view, VehicleId(0), ms(10), rts(4));
        assert_eq!(beacon_bytes(&with_rts, &cfg), 332);
        let cts = Extension::Cts(
            CtsExtension::new(vec![
                CtsEntry {
                    transmitter: VehicleId(3),
                    delay: ms(0),
                },
                CtsEntry {
                    transmitter: VehicleId(0),
                    delay: ms(50),
                },
            ])
            .unwrap(),
        );
        assert_eq!(cts.bytes(), 16);
    }

    #[test]
    fn extension_invariants() {
        assert!(RtsExtension::new(vec![]).is_err());
        let dup = vec![
            RtsEntry {
                neighbor: VehicleId(1),
                tx_dur: ms(50),
            },
            RtsEntry {
                neighbor: VehicleId(1),
                tx_dur: ms(50),
            },
        ];
        assert!(RtsExtension::new(dup).is_err());
        assert!(RtsExtension::new(vec![RtsEntry {
            neighbor: VehicleId(1),
            tx_dur: ms(0)
        }])
        .is_err());
        assert!(CtsExtension::new(vec![CtsEntry {
            transmitter: VehicleId(1),
            delay: SimTime(-1)
        }])
        .is_err());
    }

    #[test]
    fn airtime_of_332_bytes() {
        let cfg = Sub6Config::default();
        // 332 * 8 bits / 6e6 bit/s = 442.666.. µs
        assert!((cfg.airtime_us(332) - 442.6667).abs() < 1e-3);
    }

    #[test]
    fn delivery_is_the_sub6_disc() {
        let s = state(&[100.0, 250.0, 400.0, 401.0]);
        let view = s.view_at(SimTime::ZERO);
        let b = Beacon::new(&view, VehicleId(0), ms(0), Extension::None);
        assert_eq!(deliver_beacon(&b, &view), vec![VehicleId(1), VehicleId(2)]);

        let lonely = state(&[100.0, 1000.0]);
        let view = lonely.view_at(SimTime::ZERO);
        let b = Beacon::new(&view, VehicleId(0), ms(0), Extension::None);
        assert!(deliver_beacon(&b, &view).is_empty());
    }

    #[test]
    fn cbr_examples() {
        assert_eq!(cbr(VehicleId(0), ms(0), ms(100), &[]), 0.0);
        let cfg = Sub6Config::default();
        let log = vec![Delivery {
            sender: VehicleId(1),
            tx_time: ms(10),
            airtime_us: cfg.airtime_us(332),
            recipients: vec![VehicleId(0)],
        }];
        let c = cbr(VehicleId(0), ms(0), ms(100), &log);
        assert!((c - 0.004427).abs() < 1e-6, "{c}");
        // Not audible at vehicle 2.
        assert_eq!(cbr(VehicleId(2), ms(0), ms(100), &log), 0.0);
    }

    #[test]
    fn overlapping_airtime_counts_once() {
        let mut iv = vec![(0.0, 100.0), (50.0, 100.0), (500.0, 10.0)];
        let f = busy_fraction(&mut iv, SimTime::ZERO, SimTime(1000));
        assert!((f - 0.16).abs() < 1e-12);
    }

    #[test]
    fn busy_fraction_clips_to_window() {
        let mut iv = vec![(-50.0, 100.0), (990.0, 100.0)];
        let f = busy_fraction(&mut iv, SimTime::ZERO, SimTime(1000));
        assert!((f - 0.06).abs() < 1e-12);
    }

    #[test]
    fn meter_counts_sender_and_recipients() {
        let mut m = CbrMeter::new(3, ms(0), ms(100));
        m.record(VehicleId(0), &[VehicleId(1)], ms(10), 500.0, 400.0);
        let (with, base) = m.mean_cbr();
        assert!((with - (2.0 * 0.005) / 3.0).abs() < 1e-12);
        assert!((base - (2.0 * 0.004) / 3.0).abs() < 1e-12);
    }
}
