//! Sub-6GHz-assisted mmWave scheduling.
//!
//! A vehicle that wants to transmit over mmWave appends an RTS-like extension
//! (target list and per-target duration) to its next regular beacon. Each
//! addressed neighbor answers on its own next beacon with a CTS-like
//! extension carrying a start delay chosen so the new transmission overlaps
//! nothing it knows of involving either endpoint. Because extensions ride on
//! broadcast beacons, every vehicle in sub-6GHz range learns every grant and
//! keeps a conflict-free book of reservations.
//!
//! Rules beyond the basic handshake:
//! - a beacon carries an RTS or a CTS, never both; a vehicle with an RTS to
//!   send defers its CTS replies to its following beacon;
//! - pending requests are answered oldest first (ties by transmitter id), each
//!   grant entering the book before the next one is computed;
//! - the CTS delay is relative to the CTS beacon instant.

use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::scenario::{ScenarioView, VehicleId};
use crate::sub6::{
    beacon_bytes, deliver_beacon, Beacon, CtsEntry, CtsExtension, Extension, RtsEntry, RtsExtension, Sub6Config,
};
use crate::time::{overlaps, SimTime};

/// A committed directional transmission `tx → rx` over `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reservation {
    pub tx: VehicleId,
    pub rx: VehicleId,
    pub start: SimTime,
    pub end: SimTime,
}

impl Reservation {
    pub fn new(tx: VehicleId, rx: VehicleId, start: SimTime, end: SimTime) -> Self {
        debug_assert!(start < end, "empty reservation {tx}->{rx}");
        debug_assert_ne!(tx, rx);
        Reservation { tx, rx, start, end }
    }

    pub fn involves(&self, v: VehicleId) -> bool {
        self.tx == v || self.rx == v
    }

    pub fn shares_vehicle(&self, other: &Reservation) -> bool {
        self.involves(other.tx) || self.involves(other.rx)
    }

    /// Two reservations conflict when they share a vehicle and overlap in time.
    pub fn conflicts_with(&self, other: &Reservation) -> bool {
        self.shares_vehicle(other) && overlaps(self.start, self.end, other.start, other.end)
    }

    pub fn duration(&self) -> SimTime {
        self.end - self.start
    }
}

/// One vehicle's knowledge of committed reservations: its own plus every
/// grant it overheard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReservationBook {
    pub owner: VehicleId,
    known: Vec<Reservation>,
}

impl ReservationBook {
    pub fn new(owner: VehicleId) -> Self {
        ReservationBook {
            owner,
            known: Vec::new(),
        }
    }

    pub fn reservations(&self) -> &[Reservation] {
        &self.known
    }

    pub fn contains(&self, r: &Reservation) -> bool {
        self.known.contains(r)
    }

    /// Adds `r` unless already present. Returns whether it was new.
    pub fn insert(&mut self, r: Reservation) -> bool {
        if self.known.contains(&r) {
            return false;
        }
        if let Some(c) = self.known.iter().find(|k| k.conflicts_with(&r)) {
            // Only reachable if grants were computed on incomplete knowledge.
            warn!("book of {} merges {r:?} conflicting with {c:?}", self.owner);
        }
        self.known.push(r);
        true
    }

    /// Drops reservations that ended at or before `now`.
    pub fn prune(&mut self, now: SimTime) {
        self.known.retain(|r| r.end > now);
    }

    /// Smallest `s >= ref_time` such that `[s, s + dur)` overlaps no known
    /// reservation involving `tx` or `rx` in either role.
    pub fn earliest_start(&self, tx: VehicleId, rx: VehicleId, ref_time: SimTime, dur: SimTime) -> SimTime {
        let mut busy: Vec<(SimTime, SimTime)> = self
            .known
            .iter()
            .filter(|r| r.involves(tx) || r.involves(rx))
            .filter(|r| r.end > ref_time)
            .map(|r| (r.start, r.end))
            .collect();
        busy.sort_unstable();
        let mut s = ref_time;
        for (b0, b1) in busy {
            if b1 <= s {
                continue;
            }
            if b0 >= s + dur {
                break;
            }
            s = b1;
        }
        s
    }

    pub fn is_conflict_free(&self) -> bool {
        self.known
            .iter()
            .enumerate()
            .all(|(i, a)| self.known[i + 1..].iter().all(|b| !a.conflicts_with(b)))
    }

    /// Reservation `tx → rx` that has not started before `t`, if any.
    fn upcoming(&self, tx: VehicleId, rx: VehicleId, t: SimTime) -> Option<Reservation> {
        self.known
            .iter()
            .copied()
            .filter(|r| r.tx == tx && r.rx == rx && r.start >= t)
            .min_by_key(|r| r.start)
    }
}

/// An RTS entry addressed to this vehicle that it has not answered yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingRts {
    pub transmitter: VehicleId,
    pub tx_dur: SimTime,
    pub received_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntentState {
    /// An RTS will be composed at the next beacon.
    Queued,
    /// The RTS went out; some targets have not answered yet.
    Announced,
    /// Every target answered.
    Done,
    /// No LOS neighbor to address.
    NoTargets,
    /// Given up with unanswered targets.
    Expired,
}

/// A transmitter's wish to reach its LOS neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxIntent {
    pub owner: VehicleId,
    pub activated_at: SimTime,
    /// Snapshot taken at RTS composition.
    pub targets: Vec<RtsEntry>,
    /// Unanswered targets with the instant their entry was last announced.
    pub awaiting: BTreeMap<VehicleId, SimTime>,
    pub first_rts: Option<SimTime>,
    pub state: IntentState,
    /// Restricts the target set to these vehicles (scripted scenarios).
    pub pinned: Option<Vec<VehicleId>>,
}

impl TxIntent {
    pub fn is_open(&self) -> bool {
        matches!(self.state, IntentState::Queued | IntentState::Announced)
    }

    fn dur_for(&self, target: VehicleId) -> Option<SimTime> {
        self.targets.iter().find(|e| e.neighbor == target).map(|e| e.tx_dur)
    }
}

fn snapshot_targets(
    v: VehicleId,
    view: &ScenarioView<'_>,
    pinned: Option<&[VehicleId]>,
    tx_dur: SimTime,
) -> Vec<RtsEntry> {
    view.los_neighbors(v)
        .into_iter()
        .filter(|u| pinned.is_none_or(|p| p.contains(u)))
        .map(|u| RtsEntry { neighbor: u, tx_dur })
        .collect()
}

/// Starts a transmit intent for `v` at `t`. With no LOS neighbor the intent
/// is created empty and no RTS is queued.
pub fn on_become_transmitter(
    v: VehicleId,
    t: SimTime,
    view: &ScenarioView<'_>,
    tx_dur: SimTime,
    pinned: Option<Vec<VehicleId>>,
) -> TxIntent {
    let targets = snapshot_targets(v, view, pinned.as_deref(), tx_dur);
    let state = if targets.is_empty() {
        debug!("{v} became transmitter at {t} with no LOS neighbor");
        IntentState::NoTargets
    } else {
        IntentState::Queued
    };
    TxIntent {
        owner: v,
        activated_at: t,
        targets,
        awaiting: BTreeMap::new(),
        first_rts: None,
        state,
        pinned,
    }
}

/// Answers pending requests on `responder`'s beacon at `beacon_time`. Returns
/// `None` (keeping everything pending) when the beacon already carries an RTS.
pub fn compose_cts(
    responder: VehicleId,
    beacon_time: SimTime,
    pending: &mut Vec<PendingRts>,
    book: &mut ReservationBook,
    rts_on_this_beacon: bool,
) -> Option<CtsExtension> {
    if rts_on_this_beacon || pending.is_empty() {
        return None;
    }
    pending.sort_by_key(|p| (p.received_at, p.transmitter));
    let mut entries = Vec::with_capacity(pending.len());
    for p in pending.drain(..) {
        let start = match book.upcoming(p.transmitter, responder, beacon_time) {
            // Re-announced request for a pair already granted: repeat the grant.
            Some(r) => r.start,
            None => {
                let s = book.earliest_start(p.transmitter, responder, beacon_time, p.tx_dur);
                book.insert(Reservation::new(p.transmitter, responder, s, s + p.tx_dur));
                s
            }
        };
        entries.push(CtsEntry {
            transmitter: p.transmitter,
            delay: start - beacon_time,
        });
    }
    Some(CtsExtension::new(entries).expect("pending requests are distinct per transmitter"))
}

/// Transmitter side of a CTS: commits a reservation for every entry that
/// answers an awaiting target. Stale or duplicate entries are ignored.
pub fn on_receive_cts(
    transmitter: VehicleId,
    responder: VehicleId,
    cts: &CtsExtension,
    cts_time: SimTime,
    intent: &mut TxIntent,
    book: &mut ReservationBook,
) -> Vec<Reservation> {
    let mut out = Vec::new();
    for e in cts.entries().iter().filter(|e| e.transmitter == transmitter) {
        if intent.awaiting.remove(&responder).is_none() {
            debug!("{transmitter} ignores CTS entry from {responder} at {cts_time}: not awaiting");
            continue;
        }
        let dur = intent
            .dur_for(responder)
            .expect("awaiting targets come from the target list");
        let start = cts_time + e.delay;
        let r = Reservation::new(transmitter, responder, start, start + dur);
        book.insert(r);
        out.push(r);
    }
    if intent.state == IntentState::Announced && intent.awaiting.is_empty() {
        intent.state = IntentState::Done;
    }
    out
}

/// MAC state owned by one vehicle.
#[derive(Debug, Clone)]
pub struct AssistedNode {
    pub id: VehicleId,
    pub book: ReservationBook,
    pub pending: Vec<PendingRts>,
    pub intent: Option<TxIntent>,
    /// `(transmitter, target) → tx_dur` learned from overheard RTSs.
    pub dur_cache: HashMap<(VehicleId, VehicleId), SimTime>,
}

impl AssistedNode {
    pub fn new(id: VehicleId) -> Self {
        AssistedNode {
            id,
            book: ReservationBook::new(id),
            pending: Vec::new(),
            intent: None,
            dur_cache: HashMap::new(),
        }
    }
}

/// Updates `node` with an overheard beacon: caches RTS durations, queues
/// requests addressed to it, and merges CTS grants into its book. Grants that
/// answer `node`'s own request are committed and returned.
pub fn on_overhear(node: &mut AssistedNode, beacon: &Beacon, params: &AssistedParams) -> Vec<Reservation> {
    let me = node.id;
    match &beacon.extension {
        Extension::None => Vec::new(),
        Extension::Rts(rts) => {
            for e in rts.entries() {
                node.dur_cache.insert((beacon.sender, e.neighbor), e.tx_dur);
                if e.neighbor == me && !node.pending.iter().any(|p| p.transmitter == beacon.sender) {
                    node.pending.push(PendingRts {
                        transmitter: beacon.sender,
                        tx_dur: e.tx_dur,
                        received_at: beacon.tx_time,
                    });
                }
            }
            Vec::new()
        }
        Extension::Cts(cts) => {
            let mut committed = Vec::new();
            if let Some(intent) = node.intent.as_mut() {
                committed = on_receive_cts(me, beacon.sender, cts, beacon.tx_time, intent, &mut node.book);
            }
            for e in cts.entries() {
                if e.transmitter == me {
                    continue;
                }
                let dur = match node.dur_cache.get(&(e.transmitter, beacon.sender)) {
                    Some(&d) => d,
                    None => {
                        debug!(
                            "{me} heard CTS {}->{} without the RTS; assuming {}",
                            e.transmitter, beacon.sender, params.default_tx_dur
                        );
                        params.default_tx_dur
                    }
                };
                let start = beacon.tx_time + e.delay;
                node.book
                    .insert(Reservation::new(e.transmitter, beacon.sender, start, start + dur));
            }
            committed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssistedConfig {
    /// Duration requested for each target.
    pub tx_dur_ms: f64,
    /// Duration assumed for a grant whose RTS was not overheard.
    pub default_tx_dur_ms: f64,
    /// Unanswered entries are re-announced after this many beacon periods.
    pub retransmit_after_periods: u32,
    /// Intents with unanswered targets expire after this many beacon periods.
    pub expire_after_periods: u32,
}

impl Default for AssistedConfig {
    fn default() -> Self {
        AssistedConfig {
            tx_dur_ms: 50.0,
            default_tx_dur_ms: 50.0,
            retransmit_after_periods: 2,
            expire_after_periods: 10,
        }
    }
}

/// Resolved protocol timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssistedParams {
    pub tx_dur: SimTime,
    pub default_tx_dur: SimTime,
    pub beacon_period: SimTime,
    pub retransmit_after: SimTime,
    pub expire_after: SimTime,
}

impl AssistedParams {
    pub fn new(cfg: &AssistedConfig, sub6: &Sub6Config) -> Self {
        let period = sub6.beacon_period();
        AssistedParams {
            tx_dur: SimTime::from_millis_f64(cfg.tx_dur_ms),
            default_tx_dur: SimTime::from_millis_f64(cfg.default_tx_dur_ms),
            beacon_period: period,
            retransmit_after: period * cfg.retransmit_after_periods as i64,
            expire_after: period * cfg.expire_after_periods as i64,
        }
    }
}

/// A reservation as committed by its transmitter, with handshake timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub reservation: Reservation,
    pub rts_time: SimTime,
    pub cts_time: SimTime,
    pub delay: SimTime,
}

/// Everything that happened on one beacon transmission.
#[derive(Debug, Clone)]
pub struct BeaconOutcome {
    pub beacon: Beacon,
    pub bytes: u32,
    pub recipients: Vec<VehicleId>,
    pub commits: Vec<Commit>,
    /// Targets left unanswered by an intent that expired on this beacon.
    pub expired: Vec<VehicleId>,
}

/// Per-transmitter facts the metrics need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxSummary {
    pub owner: VehicleId,
    pub activated_at: SimTime,
    pub first_rts: Option<SimTime>,
    pub targets: Vec<VehicleId>,
    pub state: IntentState,
}

/// All vehicles running the assisted MAC.
#[derive(Debug, Clone)]
pub struct AssistedMac {
    pub params: AssistedParams,
    nodes: Vec<AssistedNode>,
}

impl AssistedMac {
    pub fn new(vehicles: usize, params: AssistedParams) -> Self {
        AssistedMac {
            params,
            nodes: (0..vehicles as u32).map(|i| AssistedNode::new(VehicleId(i))).collect(),
        }
    }

    pub fn node(&self, v: VehicleId) -> &AssistedNode {
        &self.nodes[v.index()]
    }

    pub fn become_transmitter(
        &mut self,
        v: VehicleId,
        t: SimTime,
        view: &ScenarioView<'_>,
        pinned: Option<Vec<VehicleId>>,
    ) -> &TxIntent {
        let node = &mut self.nodes[v.index()];
        if node.intent.as_ref().is_some_and(TxIntent::is_open) {
            warn!("{v} is already a transmitter; activation at {t} ignored");
        } else {
            node.intent = Some(on_become_transmitter(v, t, view, self.params.tx_dur, pinned));
        }
        node.intent.as_ref().expect("just set")
    }

    /// Composes, transmits and delivers `v`'s beacon at `t`.
    pub fn beacon(&mut self, v: VehicleId, t: SimTime, view: &ScenarioView<'_>, sub6: &Sub6Config) -> BeaconOutcome {
        let params = self.params;
        let node = &mut self.nodes[v.index()];
        let mut expired = Vec::new();
        let mut extension = Extension::None;

        if let Some(intent) = node.intent.as_mut() {
            match intent.state {
                IntentState::Queued => {
                    let targets = snapshot_targets(v, view, intent.pinned.as_deref(), params.tx_dur);
                    if targets.is_empty() {
                        debug!("{v} lost all LOS targets before its RTS at {t}");
                        intent.state = IntentState::NoTargets;
                    } else {
                        intent.awaiting = targets.iter().map(|e| (e.neighbor, t)).collect();
                        intent.first_rts = Some(t);
                        intent.state = IntentState::Announced;
                        extension =
                            Extension::Rts(RtsExtension::new(targets.clone()).expect("LOS neighbors are distinct"));
                        intent.targets = targets;
                    }
                }
                IntentState::Announced => {
                    let first = intent.first_rts.expect("announced intents have an RTS time");
                    if t - first > params.expire_after {
                        warn!("{v} intent expired at {t} with {} unanswered", intent.awaiting.len());
                        expired = intent.awaiting.keys().copied().collect();
                        intent.awaiting.clear();
                        intent.state = IntentState::Expired;
                    } else {
                        let stale: Vec<RtsEntry> = intent
                            .awaiting
                            .iter()
                            .filter(|(_, &at)| t - at > params.retransmit_after)
                            .map(|(&u, _)| RtsEntry {
                                neighbor: u,
                                tx_dur: intent.dur_for(u).expect("awaiting ⊆ targets"),
                            })
                            .collect();
                        if !stale.is_empty() {
                            debug!("{v} re-announces {} entries at {t}", stale.len());
                            for e in &stale {
                                intent.awaiting.insert(e.neighbor, t);
                            }
                            extension = Extension::Rts(RtsExtension::new(stale).expect("distinct"));
                        }
                    }
                }
                _ => {}
            }
        }

        if matches!(extension, Extension::None) {
            if let Some(cts) = compose_cts(v, t, &mut node.pending, &mut node.book, false) {
                extension = Extension::Cts(cts);
            }
        }
        if let Extension::Rts(rts) = &extension {
            for e in rts.entries() {
                node.dur_cache.insert((v, e.neighbor), e.tx_dur);
            }
        }

        let beacon = Beacon::new(view, v, t, extension);
        let bytes = beacon_bytes(&beacon, sub6);
        let recipients = deliver_beacon(&beacon, view);
        let mut commits = Vec::new();
        for &r in &recipients {
            let node = &mut self.nodes[r.index()];
            let rts_times: BTreeMap<VehicleId, SimTime> =
                node.intent.as_ref().map(|i| i.awaiting.clone()).unwrap_or_default();
            for res in on_overhear(node, &beacon, &params) {
                commits.push(Commit {
                    reservation: res,
                    rts_time: rts_times[&res.rx],
                    cts_time: t,
                    delay: res.start - t,
                });
            }
        }
        BeaconOutcome {
            beacon,
            bytes,
            recipients,
            commits,
            expired,
        }
    }

    /// True when no vehicle has an open intent or an unanswered request.
    pub fn is_quiescent(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.pending.is_empty() && !n.intent.as_ref().is_some_and(TxIntent::is_open))
    }

    pub fn summaries(&self) -> Vec<TxSummary> {
        self.nodes
            .iter()
            .filter_map(|n| n.intent.as_ref())
            .map(|i| TxSummary {
                owner: i.owner,
                activated_at: i.activated_at,
                first_rts: i.first_rts,
                targets: i.targets.iter().map(|e| e.neighbor).collect(),
                state: i.state,
            })
            .collect()
    }
}
