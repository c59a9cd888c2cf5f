//! Deterministic discrete-event core.
//!
//! One replication is a single-threaded event loop over a [`ScenarioState`]
//! and one MAC. Events are ordered by `(time, kind rank, subject, insertion)`
//! so every run is a pure function of its configuration and seed. The
//! [`GlobalLedger`] collects every committed transmission and is checked for
//! half-duplex violations on each commit.
//!
//! Replications run in parallel; the stop rule looks at an ordered prefix of
//! results so the outcome does not depend on the thread count.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::assisted::{AssistedConfig, AssistedMac, AssistedParams, Reservation};
use crate::error::{Error, Result};
use crate::golden::Script;
use crate::metrics::{MetricsReport, ReplicationMetrics};
use crate::ref_ad::{
    advance_cycle, allocate_slots, discover, settle_grants, start_cycle, AdCycleConfig, AdLedger, AdTransmitterState,
    GrantConflict,
};
use crate::scenario::{generate_scenario, ScenarioConfig, ScenarioState, VehicleId};
use crate::sub6::{BeaconLog, CbrMeter, Extension, Sub6Config};
use crate::time::SimTime;

const MOBILITY_STEP: SimTime = SimTime::from_millis(100);
const TRACE_TAIL: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacKind {
    Assisted,
    RefAd,
}

impl MacKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MacKind::Assisted => "assisted",
            MacKind::RefAd => "ref-ad",
        }
    }
}

impl std::str::FromStr for MacKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assisted" => Ok(MacKind::Assisted),
            "ref-ad" => Ok(MacKind::RefAd),
            other => Err(Error::config(format!(
                "unknown mac '{other}' (expected assisted or ref-ad)"
            ))),
        }
    }
}

/// When flagged vehicles start wanting to transmit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationPolicy {
    /// Once each, uniformly in `[0, beacon_period)`.
    Uniform,
    AllAtZero,
    /// Once each, exponentially distributed with mean `beacon_period`.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunParams {
    pub mac: MacKind,
    pub r_tx: f64,
    pub sim_duration_ms: f64,
    /// Upper bound on replications.
    pub replications: usize,
    /// Replications always executed before the stop rule is consulted.
    pub min_replications: usize,
    /// Target relative half-width of the 95% confidence intervals.
    pub target_ci: f64,
    pub activation: ActivationPolicy,
    /// Replace the generated scene with a scripted one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            mac: MacKind::Assisted,
            r_tx: 0.15,
            sim_duration_ms: 20_000.0,
            replications: 30,
            min_replications: 10,
            target_ci: 0.045,
            activation: ActivationPolicy::Uniform,
            script: None,
        }
    }
}

/// Everything a run needs; this is also the preset file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunParams,
    pub scenario: ScenarioConfig,
    pub sub6: Sub6Config,
    pub assisted: AssistedConfig,
    pub ad: AdCycleConfig,
}

impl RunConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.sub6.validate()?;
        self.ad.validate()?;
        let r = &self.run;
        if !(0.0..=1.0).contains(&r.r_tx) {
            return Err(Error::config(format!("r_tx must be in [0, 1], got {}", r.r_tx)));
        }
        if r.replications == 0 {
            return Err(Error::config("replications must be >= 1"));
        }
        if r.min_replications > r.replications {
            return Err(Error::config("min_replications must not exceed replications"));
        }
        if !(r.sim_duration_ms > 0.0) {
            return Err(Error::config("sim_duration_ms must be > 0"));
        }
        if !(self.assisted.tx_dur_ms > 0.0 && self.assisted.default_tx_dur_ms > 0.0) {
            return Err(Error::config("tx durations must be > 0"));
        }
        if r.mac == MacKind::Assisted {
            let need = self.min_sub6_range();
            if self.scenario.sub6_range < need {
                return Err(Error::config(format!(
                    "sub6_range {} m is below {need:.1} m: two LOS neighbors of one transmitter \
                     could miss each other's grants",
                    self.scenario.sub6_range
                )));
            }
        }
        Ok(())
    }

    /// Smallest sub-6 range for which any two LOS neighbors of a transmitter
    /// hear each other for as long as its request can stay open.
    pub fn min_sub6_range(&self) -> f64 {
        let speeds = &self.scenario.lane_speeds;
        let spread = speeds.iter().copied().fold(f64::MIN, f64::max) - speeds.iter().copied().fold(f64::MAX, f64::min);
        let open = self.sub6.beacon_period_ms * self.assisted.expire_after_periods as f64 / 1000.0;
        2.0 * self.scenario.mmwave_los_range + spread.max(0.0) * open
    }

    pub fn sim_duration(&self) -> SimTime {
        SimTime::from_millis_f64(self.run.sim_duration_ms)
    }

    /// Seed of replication `k`: an independent ChaCha stream of the base seed.
    pub fn replication_seed(&self, k: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.scenario.seed);
        rng.set_stream(k as u64 + 1);
        rng.gen()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    MobilityStep,
    ReservationEnd,
    ReservationStart,
    BecomeTransmitter,
    CycleBoundary,
    BeaconTx,
}

impl EventKind {
    /// Tie-break rank among events at the same instant.
    pub fn rank(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::MobilityStep => "mobility-step",
            EventKind::ReservationEnd => "reservation-end",
            EventKind::ReservationStart => "reservation-start",
            EventKind::BecomeTransmitter => "become-transmitter",
            EventKind::CycleBoundary => "cycle-boundary",
            EventKind::BeaconTx => "beacon-tx",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    None,
    /// Index into the ledger's reservations.
    Reservation(usize),
    Activation(Option<Vec<VehicleId>>),
    BhiStart,
    BhiEnd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub kind: EventKind,
    pub subject: VehicleId,
    pub payload: Payload,
    seq: u64,
}

impl Event {
    fn key(&self) -> (SimTime, u8, VehicleId, u64) {
        (self.time, self.kind.rank(), self.subject, self.seq)
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: SimTime, kind: EventKind, subject: VehicleId, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            kind,
            subject,
            payload,
            seq: self.seq,
        }));
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }
}

/// One newline-delimited trace record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub time: SimTime,
    pub kind: EventKind,
    pub subject: VehicleId,
    pub fields: Map<String, Value>,
}

impl LogRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("time_us".into(), json!(self.time.as_micros()));
        m.insert("kind".into(), json!(self.kind.as_str()));
        m.insert("subject".into(), json!(self.subject.0));
        for (k, v) in &self.fields {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }
}

/// Ordered event trace, optionally capped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    records: Vec<LogRecord>,
    cap: Option<usize>,
    enabled: bool,
    dropped: u64,
}

impl EventLog {
    pub fn disabled() -> Self {
        EventLog::default()
    }

    pub fn enabled(cap: Option<usize>) -> Self {
        EventLog {
            records: Vec::new(),
            cap,
            enabled: true,
            dropped: 0,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    fn push(&mut self, time: SimTime, kind: EventKind, subject: VehicleId, fields: Map<String, Value>) {
        if !self.enabled {
            return;
        }
        if self.cap.is_some_and(|c| self.records.len() >= c) {
            self.dropped += 1;
            return;
        }
        self.records.push(LogRecord {
            time,
            kind,
            subject,
            fields,
        });
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, &r.to_json())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn tail(&self, n: usize) -> String {
        let start = self.records.len().saturating_sub(n);
        self.records[start..]
            .iter()
            .map(|r| r.to_json().to_string())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A committed mmWave transmission with handshake or cycle annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub reservation: Reservation,
    pub rts_time: Option<SimTime>,
    pub cts_time: Option<SimTime>,
    pub delay: Option<SimTime>,
    pub cycle: Option<u32>,
    pub bhi: Option<(SimTime, SimTime)>,
    /// Set when the pair was not in LOS at the start or end of the transmission.
    pub los_failed: bool,
}

/// Per-transmitter facts collected over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmitterRecord {
    pub id: VehicleId,
    pub activated_at: SimTime,
    pub first_rts: Option<SimTime>,
    /// The LOS neighbor set the transmitter set out to serve.
    pub targets: Vec<VehicleId>,
    pub cycles: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub tx: VehicleId,
    pub cycle: u32,
    pub bhi_start: SimTime,
    pub bhi_end: SimTime,
    pub discovered: Vec<VehicleId>,
}

#[derive(Debug, Clone, Serialize)]
struct LedgerCsvRow {
    tx: u32,
    rx: u32,
    start_ms: f64,
    end_ms: f64,
    rts_time_ms: Option<f64>,
    cts_time_ms: Option<f64>,
    delay_ms: Option<f64>,
    cycle: Option<u32>,
    bhi_start_ms: Option<f64>,
    bhi_end_ms: Option<f64>,
    los_failed: bool,
}

/// Everything a replication produced.
#[derive(Debug, Clone, Default)]
pub struct GlobalLedger {
    pub vehicle_count: usize,
    pub entries: Vec<LedgerEntry>,
    by_vehicle: Vec<Vec<usize>>,
    pub transmitters: Vec<TransmitterRecord>,
    pub conflicts: Vec<GrantConflict>,
    pub cycles: Vec<CycleRecord>,
    pub beacon_log: BeaconLog,
    /// Scheduling-extension bytes attributed to each transmitter's round.
    pub round_bytes: BTreeMap<VehicleId, u64>,
    /// Population-mean CBR with and without extensions.
    pub cbr: Option<(f64, f64)>,
    /// Targets left unanswered when an assisted intent expired.
    pub expired_targets: usize,
    pub end_time: SimTime,
}

impl GlobalLedger {
    fn new(vehicle_count: usize) -> Self {
        GlobalLedger {
            vehicle_count,
            by_vehicle: vec![Vec::new(); vehicle_count],
            ..GlobalLedger::default()
        }
    }

    /// Appends a reservation after checking it against every committed
    /// reservation sharing a vehicle with it.
    fn commit(&mut self, entry: LedgerEntry, log: &EventLog) -> Result<usize> {
        let r = entry.reservation;
        for v in [r.tx, r.rx] {
            if let Some(&j) = self.by_vehicle[v.index()]
                .iter()
                .find(|&&j| self.entries[j].reservation.conflicts_with(&r))
            {
                return Err(Error::Invariant {
                    time: r.start,
                    message: format!(
                        "half-duplex violated at {v}: {:?} overlaps {:?}",
                        r, self.entries[j].reservation
                    ),
                    trace: log.tail(TRACE_TAIL),
                });
            }
        }
        let i = self.entries.len();
        self.entries.push(entry);
        self.by_vehicle[r.tx.index()].push(i);
        self.by_vehicle[r.rx.index()].push(i);
        Ok(i)
    }

    pub fn reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.entries.iter().map(|e| &e.reservation)
    }

    /// Reservations in which `v` takes part, in commit order.
    pub fn involving(&self, v: VehicleId) -> impl Iterator<Item = &LedgerEntry> {
        self.by_vehicle[v.index()].iter().map(|&i| &self.entries[i])
    }

    /// Whether no two reservations sharing a vehicle overlap in time.
    pub fn is_half_duplex(&self) -> bool {
        self.by_vehicle.iter().all(|list| {
            list.iter().enumerate().all(|(k, &i)| {
                list[k + 1..]
                    .iter()
                    .all(|&j| !self.entries[i].reservation.conflicts_with(&self.entries[j].reservation))
            })
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let ms = |t: SimTime| t.as_millis_f64();
        for e in &self.entries {
            let r = e.reservation;
            out.serialize(LedgerCsvRow {
                tx: r.tx.0,
                rx: r.rx.0,
                start_ms: ms(r.start),
                end_ms: ms(r.end),
                rts_time_ms: e.rts_time.map(ms),
                cts_time_ms: e.cts_time.map(ms),
                delay_ms: e.delay.map(ms),
                cycle: e.cycle,
                bhi_start_ms: e.bhi.map(|b| ms(b.0)),
                bhi_end_ms: e.bhi.map(|b| ms(b.1)),
                los_failed: e.los_failed,
            })?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A scheduled start of transmitter behavior.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Activation {
    pub vehicle: VehicleId,
    pub at: SimTime,
    /// Restrict the target set (scripted scenarios only).
    pub pinned_targets: Option<Vec<VehicleId>>,
}

/// A prepared replication: the initial scene plus transmitter activations.
#[derive(Debug, Clone)]
pub struct Setup {
    pub state: ScenarioState,
    pub activations: Vec<Activation>,
}

/// Activation times for every flagged transmitter under `policy`.
pub fn activate_transmitters<R: Rng + ?Sized>(
    state: &ScenarioState,
    policy: ActivationPolicy,
    beacon_period: SimTime,
    rng: &mut R,
) -> Vec<Activation> {
    state
        .transmitters()
        .map(|v| {
            let at = match policy {
                ActivationPolicy::AllAtZero => SimTime::ZERO,
                ActivationPolicy::Uniform => SimTime(rng.gen_range(0..beacon_period.as_micros())),
                ActivationPolicy::Poisson => {
                    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                    SimTime((-u.ln() * beacon_period.as_micros() as f64).round() as i64)
                }
            };
            Activation {
                vehicle: v.id,
                at,
                pinned_targets: None,
            }
        })
        .collect()
}

/// Generates the scene and activations of replication `seed`.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Setup> {
    if let Some(script) = cfg.run.script {
        return crate::golden::setup(script, cfg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = cfg.sub6.beacon_period();
    let state = generate_scenario(&cfg.scenario, cfg.run.r_tx, period, &mut rng)?;
    let activations = activate_transmitters(&state, cfg.run.activation, period, &mut rng);
    Ok(Setup { state, activations })
}

enum MacState {
    Assisted(AssistedMac),
    RefAd {
        states: Vec<Option<AdTransmitterState>>,
        ledger: AdLedger,
    },
}

struct Sim<'a> {
    cfg: &'a RunConfig,
    state: ScenarioState,
    queue: EventQueue,
    mac: MacState,
    ledger: GlobalLedger,
    log: EventLog,
    cbr: Option<CbrMeter>,
    end: SimTime,
    activations_left: usize,
    reservation_events_left: usize,
    cycling: usize,
    pinned: HashMap<VehicleId, Vec<VehicleId>>,
}

/// Output of one replication.
#[derive(Debug, Clone)]
pub struct Replication {
    pub seed: u64,
    pub ledger: GlobalLedger,
    pub log: EventLog,
    pub metrics: ReplicationMetrics,
}

/// Runs one prepared replication to completion.
pub fn simulate(cfg: &RunConfig, setup: Setup, log: EventLog) -> Result<(GlobalLedger, EventLog)> {
    cfg.validate()?;
    let n = setup.state.len();
    let mac = match cfg.run.mac {
        MacKind::Assisted => MacState::Assisted(AssistedMac::new(n, AssistedParams::new(&cfg.assisted, &cfg.sub6))),
        MacKind::RefAd => MacState::RefAd {
            states: vec![None; n],
            ledger: AdLedger::with_blind_window(n, cfg.ad.blind_window),
        },
    };
    let first_activation = setup.activations.iter().map(|a| a.at).min();
    let cbr = match (cfg.run.mac, first_activation) {
        (MacKind::Assisted, Some(t0)) => Some(CbrMeter::new(n, t0, cfg.sub6.cbr_window())),
        _ => None,
    };
    let mut sim = Sim {
        cfg,
        queue: EventQueue::default(),
        mac,
        ledger: GlobalLedger::new(n),
        log,
        cbr,
        end: cfg.sim_duration(),
        activations_left: setup.activations.len(),
        reservation_events_left: 0,
        cycling: 0,
        pinned: HashMap::new(),
        state: setup.state,
    };
    sim.seed_events(setup.activations);
    sim.run()?;
    Ok((sim.ledger, sim.log))
}

impl<'a> Sim<'a> {
    fn seed_events(&mut self, activations: Vec<Activation>) {
        let t0 = self.state.time;
        self.queue
            .push(t0 + MOBILITY_STEP, EventKind::MobilityStep, VehicleId(0), Payload::None);
        if matches!(self.mac, MacState::Assisted(_)) {
            let period = self.cfg.sub6.beacon_period();
            for v in &self.state.vehicles {
                let t = crate::sub6::next_beacon_time(v.beacon_phase, period, t0);
                self.queue.push(t, EventKind::BeaconTx, v.id, Payload::None);
            }
        }
        for a in activations {
            self.queue.push(
                a.at,
                EventKind::BecomeTransmitter,
                a.vehicle,
                Payload::Activation(a.pinned_targets),
            );
        }
    }

    fn quiescent(&self, now: SimTime) -> bool {
        if self.activations_left > 0 || self.reservation_events_left > 0 {
            return false;
        }
        match &self.mac {
            MacState::Assisted(mac) => mac.is_quiescent() && self.cbr.as_ref().is_none_or(|m| now >= m.window_end()),
            MacState::RefAd { .. } => self.cycling == 0,
        }
    }

    fn run(&mut self) -> Result<()> {
        while let Some(t) = self.queue.peek_time() {
            if t > self.end {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.handle(ev)?;
            if self.quiescent(t) {
                debug!("quiescent at {t}");
                break;
            }
        }
        self.ledger.end_time = self.queue.peek_time().unwrap_or(self.end).min(self.end);
        self.finish();
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<()> {
        let t = ev.time;
        match ev.kind {
            EventKind::MobilityStep => {
                self.state = self.state.step_mobility(t - self.state.time);
                self.queue
                    .push(t + MOBILITY_STEP, EventKind::MobilityStep, VehicleId(0), Payload::None);
                if self.log.is_enabled() {
                    self.log.push(t, ev.kind, ev.subject, Map::new());
                }
            }
            EventKind::BecomeTransmitter => {
                self.activations_left -= 1;
                let pinned = match ev.payload {
                    Payload::Activation(p) => p,
                    _ => None,
                };
                self.on_activation(ev.subject, t, pinned)?;
            }
            EventKind::BeaconTx => self.on_beacon(ev.subject, t)?,
            EventKind::CycleBoundary => match ev.payload {
                Payload::BhiStart => self.on_bhi_start(ev.subject, t),
                Payload::BhiEnd => self.on_bhi_end(ev.subject, t)?,
                _ => unreachable!("cycle boundary without phase"),
            },
            EventKind::ReservationStart | EventKind::ReservationEnd => {
                self.reservation_events_left -= 1;
                let Payload::Reservation(i) = ev.payload else {
                    unreachable!("reservation event without index")
                };
                let r = self.ledger.entries[i].reservation;
                if !self.state.view_at(t).los(r.tx, r.rx) {
                    self.ledger.entries[i].los_failed = true;
                }
                if self.log.is_enabled() {
                    let mut f = Map::new();
                    f.insert("rx".into(), json!(r.rx.0));
                    f.insert("start_us".into(), json!(r.start.as_micros()));
                    f.insert("end_us".into(), json!(r.end.as_micros()));
                    self.log.push(t, ev.kind, r.tx, f);
                }
            }
        }
        Ok(())
    }

    fn on_activation(&mut self, v: VehicleId, t: SimTime, pinned: Option<Vec<VehicleId>>) -> Result<()> {
        let view = self.state.view_at(t);
        let mut fields = Map::new();
        match &mut self.mac {
            MacState::Assisted(mac) => {
                let intent = mac.become_transmitter(v, t, &view, pinned.clone());
                fields.insert(
                    "targets".into(),
                    json!(intent.targets.iter().map(|e| e.neighbor.0).collect::<Vec<_>>()),
                );
            }
            MacState::RefAd { states, ledger } => {
                let targets: Vec<VehicleId> = view
                    .los_neighbors(v)
                    .into_iter()
                    .filter(|u| pinned.as_ref().is_none_or(|p| p.contains(u)))
                    .collect();
                fields.insert("targets".into(), json!(targets.iter().map(|u| u.0).collect::<Vec<_>>()));
                if targets.is_empty() {
                    debug!("{v} became transmitter at {t} with no LOS neighbor");
                } else {
                    self.cycling += 1;
                }
                let st = start_cycle(v, t, targets);
                let has_targets = !st.targets.is_empty();
                states[v.index()] = Some(st);
                if has_targets {
                    let bhi_end = t + self.cfg.ad.bhi();
                    ledger.record_cycle(v, t, &self.cfg.ad);
                    self.queue.push(bhi_end, EventKind::CycleBoundary, v, Payload::BhiEnd);
                }
            }
        }
        if let Some(p) = pinned {
            self.pinned.insert(v, p);
        }
        self.log.push(t, EventKind::BecomeTransmitter, v, fields);
        Ok(())
    }

    fn on_beacon(&mut self, v: VehicleId, t: SimTime) -> Result<()> {
        let MacState::Assisted(mac) = &mut self.mac else {
            return Ok(());
        };
        let view = self.state.view_at(t);
        let out = mac.beacon(v, t, &view, &self.cfg.sub6);
        self.ledger.expired_targets += out.expired.len();
        if self.log.is_enabled() && !out.expired.is_empty() {
            let mut f = Map::new();
            f.insert(
                "expired".into(),
                json!(out.expired.iter().map(|u| u.0).collect::<Vec<_>>()),
            );
            self.log.push(t, EventKind::BeaconTx, v, f);
        }
        self.queue
            .push(t + self.cfg.sub6.beacon_period(), EventKind::BeaconTx, v, Payload::None);

        self.ledger
            .beacon_log
            .push(&out.beacon, out.bytes, out.recipients.len());
        let entry_bytes = crate::sub6::ENTRY_BYTES as u64;
        match &out.beacon.extension {
            Extension::Rts(rts) => {
                *self.ledger.round_bytes.entry(v).or_default() += entry_bytes * rts.entries().len() as u64;
            }
            Extension::Cts(cts) => {
                for e in cts.entries() {
                    *self.ledger.round_bytes.entry(e.transmitter).or_default() += entry_bytes;
                }
            }
            Extension::None => {}
        }
        if let Some(meter) = self.cbr.as_mut() {
            let airtime = self.cfg.sub6.airtime_us(out.bytes);
            let base = self.cfg.sub6.airtime_us(self.cfg.sub6.base_beacon_bytes);
            meter.record(v, &out.recipients, t, airtime, base);
        }
        if self.log.is_enabled() && !matches!(out.beacon.extension, Extension::None) {
            let mut f = Map::new();
            f.insert("extension".into(), json!(out.beacon.extension.kind()));
            f.insert("entries".into(), serde_json::to_value(&out.beacon.extension)?);
            f.insert("bytes".into(), json!(out.bytes));
            f.insert("recipients".into(), json!(out.recipients.len()));
            self.log.push(t, EventKind::BeaconTx, v, f);
        }
        for c in out.commits {
            let entry = LedgerEntry {
                reservation: c.reservation,
                rts_time: Some(c.rts_time),
                cts_time: Some(c.cts_time),
                delay: Some(c.delay),
                cycle: None,
                bhi: None,
                los_failed: false,
            };
            self.commit(entry)?;
        }
        Ok(())
    }

    fn commit(&mut self, entry: LedgerEntry) -> Result<()> {
        let r = entry.reservation;
        let i = self.ledger.commit(entry, &self.log)?;
        self.queue
            .push(r.start, EventKind::ReservationStart, r.tx, Payload::Reservation(i));
        self.queue
            .push(r.end, EventKind::ReservationEnd, r.tx, Payload::Reservation(i));
        self.reservation_events_left += 2;
        Ok(())
    }

    fn on_bhi_start(&mut self, v: VehicleId, t: SimTime) {
        let MacState::RefAd { states, ledger } = &mut self.mac else {
            return;
        };
        let st = states[v.index()].as_ref().expect("cycling transmitter has state");
        debug_assert_eq!(st.cycle_start, t);
        let bhi_end = t + self.cfg.ad.bhi();
        ledger.record_cycle(v, t, &self.cfg.ad);
        self.queue.push(bhi_end, EventKind::CycleBoundary, v, Payload::BhiEnd);
        let mut f = Map::new();
        f.insert("phase".into(), json!("bhi-start"));
        f.insert("cycle".into(), json!(st.cycle_index));
        self.log.push(t, EventKind::CycleBoundary, v, f);
    }

    fn on_bhi_end(&mut self, v: VehicleId, t: SimTime) -> Result<()> {
        let ad = &self.cfg.ad;
        let MacState::RefAd { states, ledger } = &mut self.mac else {
            return Ok(());
        };
        let mut st = states[v.index()].take().expect("cycling transmitter has state");
        let bhi = st.bhi_window(ad);
        let discovered = discover(
            v,
            bhi,
            &self.state.view_at(bhi.0),
            &self.state.view_at(bhi.1),
            ledger,
            &st.unserved,
            ad.max_neighbors,
        );
        self.ledger.cycles.push(CycleRecord {
            tx: v,
            cycle: st.cycle_index,
            bhi_start: bhi.0,
            bhi_end: bhi.1,
            discovered: discovered.clone(),
        });
        let grants = allocate_slots(&mut st, discovered, ad);
        let mut outcomes = Vec::with_capacity(grants.len());
        let mut accepted = Vec::new();
        for g in grants {
            match ledger.offer(g) {
                Ok(()) => {
                    accepted.push(g);
                    outcomes.push((g, true));
                }
                Err(c) => {
                    self.ledger.conflicts.push(c);
                    outcomes.push((g, false));
                }
            }
        }
        settle_grants(&mut st, &outcomes);

        let mut f = Map::new();
        f.insert("phase".into(), json!("bhi-end"));
        f.insert("cycle".into(), json!(st.cycle_index));
        f.insert(
            "discovered".into(),
            json!(st.discovered.iter().map(|u| u.0).collect::<Vec<_>>()),
        );
        f.insert(
            "granted".into(),
            json!(outcomes
                .iter()
                .map(|(g, ok)| json!([g.rx.0, g.slot, ok]))
                .collect::<Vec<_>>()),
        );
        self.log.push(t, EventKind::CycleBoundary, v, f);

        let cycle = st.cycle_index;
        let more = !st.unserved.is_empty() && st.cycle_index + 1 < ad.max_cycles;
        if more {
            advance_cycle(&mut st, ad);
            self.queue
                .push(st.cycle_start, EventKind::CycleBoundary, v, Payload::BhiStart);
        } else {
            self.cycling -= 1;
        }
        states[v.index()] = Some(st);
        for g in accepted {
            self.commit(LedgerEntry {
                reservation: g.reservation(),
                rts_time: None,
                cts_time: None,
                delay: None,
                cycle: Some(cycle),
                bhi: Some(bhi),
                los_failed: false,
            })?;
        }
        Ok(())
    }

    fn finish(&mut self) {
        match &self.mac {
            MacState::Assisted(mac) => {
                self.ledger.transmitters = mac
                    .summaries()
                    .into_iter()
                    .map(|s| TransmitterRecord {
                        id: s.owner,
                        activated_at: s.activated_at,
                        first_rts: s.first_rts,
                        targets: s.targets,
                        cycles: 0,
                    })
                    .collect();
                self.ledger.cbr = self.cbr.as_ref().map(CbrMeter::mean_cbr);
            }
            MacState::RefAd { states, .. } => {
                self.ledger.transmitters = states
                    .iter()
                    .flatten()
                    .map(|st| TransmitterRecord {
                        id: st.owner,
                        activated_at: st.activated_at,
                        first_rts: None,
                        targets: st.targets.clone(),
                        cycles: if st.targets.is_empty() { 0 } else { st.cycle_index + 1 },
                    })
                    .collect();
            }
        }
        self.ledger.transmitters.sort_by_key(|t| t.id);
    }
}

/// Runs replication `k` of `cfg`.
pub fn run_replication(cfg: &RunConfig, k: usize, log: EventLog) -> Result<Replication> {
    let seed = cfg.replication_seed(k);
    let setup = prepare(cfg, seed)?;
    let (ledger, log) = simulate(cfg, setup, log)?;
    let mut metrics = ReplicationMetrics::compute(&ledger, cfg);
    metrics.seed = seed;
    Ok(Replication {
        seed,
        ledger,
        log,
        metrics,
    })
}

/// Result of a multi-replication run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub replications: Vec<ReplicationMetrics>,
    pub report: MetricsReport,
    /// The first replication, kept whole for trace and ledger export.
    pub first: Replication,
}

/// Runs replications (in parallel batches) until the 95% CI target is met or
/// `replications` is exhausted.
pub fn run(cfg: &RunConfig, trace: Option<Option<usize>>) -> Result<RunOutput> {
    cfg.validate()?;
    let max = cfg.run.replications;
    let min = cfg.run.min_replications.max(1);
    let batch = rayon::current_num_threads().max(1);
    let mut done: Vec<Replication> = Vec::new();
    let mut stop_at = None;
    while done.len() < max && stop_at.is_none() {
        let from = done.len();
        let to = (from + batch.max(min.saturating_sub(from))).min(max);
        let mut results: Vec<Result<Replication>> = (from..to)
            .into_par_iter()
            .map(|k| {
                let log = match (k, trace) {
                    (0, Some(cap)) => EventLog::enabled(cap),
                    _ => EventLog::disabled(),
                };
                run_replication(cfg, k, log)
            })
            .collect();
        for (k, r) in (from..to).zip(results.drain(..)) {
            let r = r.map_err(|e| match e {
                Error::Invariant { time, message, trace } => Error::Invariant {
                    time,
                    message: format!("replication {k} (seed {}): {message}", cfg.replication_seed(k)),
                    trace,
                },
                other => other,
            })?;
            done.push(r);
            if done.len() >= min {
                let ms: Vec<ReplicationMetrics> = done.iter().map(|r| r.metrics.clone()).collect();
                if MetricsReport::aggregate(cfg, &ms).meets_target(cfg.run.target_ci) {
                    stop_at = Some(done.len());
                    break;
                }
            }
        }
    }
    if let Some(n) = stop_at {
        done.truncate(n);
    }
    info!(
        "{} r_tx={} finished after {} replications",
        cfg.run.mac.as_str(),
        cfg.run.r_tx,
        done.len()
    );
    let metrics: Vec<ReplicationMetrics> = done.iter().map(|r| r.metrics.clone()).collect();
    let report = MetricsReport::aggregate(cfg, &metrics);
    let first = done.into_iter().next().expect("at least one replication");
    Ok(RunOutput {
        config: cfg.clone(),
        replications: metrics,
        report,
        first,
    })
}
