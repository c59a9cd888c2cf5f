//! Reference 802.11ad-style MAC for V2V.
//!
//! Each transmitter runs its own back-to-back cycles, anchored at the moment
//! it becomes a transmitter and unsynchronized with everybody else. A cycle
//! opens with a control interval (BHI) in which the transmitter discovers
//! idle LOS neighbors, followed by a data interval (DTI) split into fixed
//! slots handed out in discovery order.
//!
//! Discovery fails for a neighbor that is busy on another mmWave link during
//! the BHI, or that is a transmitter itself inside its own cycle (or only its
//! own BHI, see [`BlindWindow`]) at that time. Grants that collide at a vehicle are
//! arbitrated in favor of the grant whose BHI ended first; the loser's target
//! goes back to the unserved set and is retried next cycle.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assisted::Reservation;
use crate::error::{Error, Result};
use crate::scenario::{ScenarioView, VehicleId};
use crate::time::{overlaps, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdCycleConfig {
    pub bhi_dur_ms: f64,
    pub dti_dur_ms: f64,
    pub slot_dur_ms: f64,
    pub max_neighbors: usize,
    pub control_bytes_per_neighbor: u64,
    /// A transmitter stops after this many cycles even with targets unserved.
    pub max_cycles: u32,
    pub blind_window: BlindWindow,
}

/// The part of a transmitter's own cycle during which other transmitters
/// cannot detect it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlindWindow {
    #[default]
    Bhi,
    /// BHI and DTI.
    Cycle,
}

impl Default for AdCycleConfig {
    fn default() -> Self {
        AdCycleConfig {
            bhi_dur_ms: 35.84,
            dti_dur_ms: 250.0,
            slot_dur_ms: 50.0,
            max_neighbors: 5,
            control_bytes_per_neighbor: 5800,
            max_cycles: 20,
            blind_window: BlindWindow::Cycle,
        }
    }
}

impl AdCycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bhi_dur_ms > 0.0 && self.dti_dur_ms > 0.0 && self.slot_dur_ms > 0.0) {
            return Err(Error::config("802.11ad interval durations must be > 0"));
        }
        if self.max_neighbors == 0 || self.max_cycles == 0 {
            return Err(Error::config("max_neighbors and max_cycles must be >= 1"));
        }
        if self.max_neighbors as f64 * self.slot_dur_ms > self.dti_dur_ms + 1e-9 {
            return Err(Error::config(format!(
                "{} slots of {} ms do not fit a {} ms data interval",
                self.max_neighbors, self.slot_dur_ms, self.dti_dur_ms
            )));
        }
        Ok(())
    }

    pub fn bhi(&self) -> SimTime {
        SimTime::from_millis_f64(self.bhi_dur_ms)
    }

    pub fn dti(&self) -> SimTime {
        SimTime::from_millis_f64(self.dti_dur_ms)
    }

    pub fn slot(&self) -> SimTime {
        SimTime::from_millis_f64(self.slot_dur_ms)
    }

    pub fn cycle(&self) -> SimTime {
        self.bhi() + self.dti()
    }

    /// Share of mmWave channel time spent in the control interval.
    /// Computed on integer microseconds so it is the correctly rounded ratio.
    pub fn control_time_fraction(&self) -> f64 {
        self.bhi().as_micros() as f64 / self.cycle().as_micros() as f64
    }
}

/// Per-cycle state of one transmitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdTransmitterState {
    pub owner: VehicleId,
    pub activated_at: SimTime,
    pub cycle_index: u32,
    pub cycle_start: SimTime,
    /// LOS neighbors at activation; the set the transmitter wants to serve.
    pub targets: Vec<VehicleId>,
    pub discovered: Vec<VehicleId>,
    pub slot_map: Vec<Option<VehicleId>>,
    pub unserved: BTreeSet<VehicleId>,
    /// Targets that were discovered before but not served, in retry order.
    pub carry_over: Vec<VehicleId>,
}

impl AdTransmitterState {
    pub fn bhi_window(&self, cfg: &AdCycleConfig) -> (SimTime, SimTime) {
        (self.cycle_start, self.cycle_start + cfg.bhi())
    }

    pub fn dti_window(&self, cfg: &AdCycleConfig) -> (SimTime, SimTime) {
        let s = self.cycle_start + cfg.bhi();
        (s, s + cfg.dti())
    }

    /// Slot `k` covers `[cycle_start + bhi + k·slot, +slot)`.
    pub fn slot_window(&self, cfg: &AdCycleConfig, k: usize) -> (SimTime, SimTime) {
        let s = self.cycle_start + cfg.bhi() + cfg.slot() * k as i64;
        (s, s + cfg.slot())
    }

    pub fn next_cycle_start(&self, cfg: &AdCycleConfig) -> SimTime {
        self.cycle_start + cfg.cycle()
    }
}

/// First cycle of `v`, starting at `t`.
pub fn start_cycle(v: VehicleId, t: SimTime, targets: Vec<VehicleId>) -> AdTransmitterState {
    AdTransmitterState {
        owner: v,
        activated_at: t,
        cycle_index: 0,
        cycle_start: t,
        unserved: targets.iter().copied().collect(),
        targets,
        discovered: Vec::new(),
        slot_map: Vec::new(),
        carry_over: Vec::new(),
    }
}

/// Moves `st` to its next back-to-back cycle.
pub fn advance_cycle(st: &mut AdTransmitterState, cfg: &AdCycleConfig) {
    st.cycle_start = st.next_cycle_start(cfg);
    st.cycle_index += 1;
    st.discovered.clear();
    st.slot_map.clear();
}

/// One slot handed out at the end of a BHI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGrant {
    pub tx: VehicleId,
    pub rx: VehicleId,
    pub start: SimTime,
    pub end: SimTime,
    pub bhi_end: SimTime,
    pub cycle: u32,
    pub slot: usize,
}

impl SlotGrant {
    pub fn reservation(&self) -> Reservation {
        Reservation::new(self.tx, self.rx, self.start, self.end)
    }

    /// Arbitration priority: earlier BHI end wins, then lower transmitter id.
    fn priority(&self) -> (SimTime, VehicleId, usize) {
        (self.bhi_end, self.tx, self.slot)
    }
}

/// A grant that lost arbitration at `at` against `winner`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantConflict {
    pub at: VehicleId,
    pub winner: SlotGrant,
    pub loser: SlotGrant,
}

/// Who is busy when, as far as the 802.11ad transmitters are concerned.
#[derive(Debug, Clone, Default)]
pub struct AdLedger {
    accepted: Vec<SlotGrant>,
    by_vehicle: Vec<Vec<usize>>,
    bhis: Vec<Vec<(SimTime, SimTime)>>,
    cycles: Vec<Vec<(SimTime, SimTime)>>,
    conflicts: Vec<GrantConflict>,
    blind: BlindWindow,
}

impl AdLedger {
    /// A ledger where only overlapping BHIs hide transmitters from each other.
    pub fn new(vehicles: usize) -> Self {
        Self::with_blind_window(vehicles, BlindWindow::Bhi)
    }

    pub fn with_blind_window(vehicles: usize, blind: BlindWindow) -> Self {
        AdLedger {
            accepted: Vec::new(),
            by_vehicle: vec![Vec::new(); vehicles],
            bhis: vec![Vec::new(); vehicles],
            cycles: vec![Vec::new(); vehicles],
            conflicts: Vec::new(),
            blind,
        }
    }

    /// Records the cycle of `v` starting at `start`.
    pub fn record_cycle(&mut self, v: VehicleId, start: SimTime, cfg: &AdCycleConfig) {
        self.bhis[v.index()].push((start, start + cfg.bhi()));
        self.cycles[v.index()].push((start, start + cfg.cycle()));
    }

    pub fn bhis_of(&self, v: VehicleId) -> &[(SimTime, SimTime)] {
        &self.bhis[v.index()]
    }

    pub fn accepted(&self) -> &[SlotGrant] {
        &self.accepted
    }

    pub fn conflicts(&self) -> &[GrantConflict] {
        &self.conflicts
    }

    /// Whether `v` is on an accepted link (either role) overlapping `[s, e)`.
    pub fn link_active(&self, v: VehicleId, s: SimTime, e: SimTime) -> bool {
        self.blocking_grant(v, s, e).is_some()
    }

    fn blocking_grant(&self, v: VehicleId, s: SimTime, e: SimTime) -> Option<&SlotGrant> {
        self.by_vehicle[v.index()]
            .iter()
            .map(|&i| &self.accepted[i])
            .find(|g| overlaps(g.start, g.end, s, e))
    }

    /// Whether `v` is hidden by its own BHI (or cycle) during `[s, e)`.
    pub fn blind(&self, v: VehicleId, s: SimTime, e: SimTime) -> bool {
        let windows = match self.blind {
            BlindWindow::Bhi => &self.bhis,
            BlindWindow::Cycle => &self.cycles,
        };
        windows[v.index()].iter().any(|&(b0, b1)| overlaps(b0, b1, s, e))
    }

    /// Offers a grant. It is accepted unless either endpoint already holds an
    /// accepted overlapping grant; offers must arrive in arbitration order.
    pub fn offer(&mut self, g: SlotGrant) -> std::result::Result<(), GrantConflict> {
        for v in [g.rx, g.tx] {
            if let Some(w) = self.blocking_grant(v, g.start, g.end) {
                debug_assert!(w.priority() < g.priority(), "grants offered out of order");
                let c = GrantConflict {
                    at: v,
                    winner: *w,
                    loser: g,
                };
                self.conflicts.push(c);
                return Err(c);
            }
        }
        let i = self.accepted.len();
        self.accepted.push(g);
        self.by_vehicle[g.tx.index()].push(i);
        self.by_vehicle[g.rx.index()].push(i);
        Ok(())
    }
}

/// Neighbors `v` detects in its BHI `[bhi.0, bhi.1)`, nearest first, at most
/// `max_neighbors`, restricted to `candidates`. A neighbor `u` is detected iff
/// it is a LOS neighbor at both ends of the BHI, has no active link
/// overlapping it, and is not hidden by its own cycle ([`AdLedger::blind`]).
pub fn discover(
    v: VehicleId,
    bhi: (SimTime, SimTime),
    at_start: &ScenarioView<'_>,
    at_end: &ScenarioView<'_>,
    ledger: &AdLedger,
    candidates: &BTreeSet<VehicleId>,
    max_neighbors: usize,
) -> Vec<VehicleId> {
    let los_end: BTreeSet<VehicleId> = at_end.los_neighbors(v).into_iter().collect();
    let mut found: Vec<(f64, VehicleId)> = at_start
        .los_neighbors(v)
        .into_iter()
        .filter(|u| candidates.contains(u) && los_end.contains(u))
        .filter(|&u| !ledger.link_active(u, bhi.0, bhi.1))
        .filter(|&u| !ledger.blind(u, bhi.0, bhi.1))
        .map(|u| (at_start.ring_distance(v, u), u))
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.truncate(max_neighbors);
    found.into_iter().map(|(_, u)| u).collect()
}

/// Assigns slots 0..k-1: carry-overs first (in their retry order), then the
/// remaining discoveries in discovery order.
pub fn allocate_slots(st: &mut AdTransmitterState, discovered: Vec<VehicleId>, cfg: &AdCycleConfig) -> Vec<SlotGrant> {
    let mut order: Vec<VehicleId> = st
        .carry_over
        .iter()
        .copied()
        .filter(|u| discovered.contains(u))
        .collect();
    let rest: Vec<VehicleId> = discovered.iter().copied().filter(|u| !order.contains(u)).collect();
    order.extend(rest);
    order.truncate(cfg.max_neighbors);
    st.discovered = discovered;
    st.slot_map = order.iter().copied().map(Some).collect();
    let bhi_end = st.bhi_window(cfg).1;
    order
        .into_iter()
        .enumerate()
        .map(|(k, rx)| {
            let (start, end) = st.slot_window(cfg, k);
            SlotGrant {
                tx: st.owner,
                rx,
                start,
                end,
                bhi_end,
                cycle: st.cycle_index,
                slot: k,
            }
        })
        .collect()
}

/// Records the outcome of this cycle's grants on `st`: accepted targets
/// leave the unserved set, rejected ones join the carry-over list.
pub fn settle_grants(st: &mut AdTransmitterState, outcomes: &[(SlotGrant, bool)]) {
    for (g, accepted) in outcomes {
        if *accepted {
            st.unserved.remove(&g.rx);
            st.carry_over.retain(|&u| u != g.rx);
        } else if !st.carry_over.contains(&g.rx) {
            st.carry_over.push(g.rx);
        }
    }
    for &u in &st.discovered {
        if st.unserved.contains(&u) && !st.carry_over.contains(&u) {
            st.carry_over.push(u);
        }
    }
}

/// Batch arbitration over all grants of an epoch: processed in
/// (BHI end, transmitter id, slot) order, each accepted unless a vehicle it
/// involves already holds an accepted overlapping grant.
pub fn resolve_grant_conflicts(grants: &[SlotGrant], vehicles: usize) -> (Vec<SlotGrant>, Vec<GrantConflict>) {
    let mut sorted = grants.to_vec();
    sorted.sort_by_key(SlotGrant::priority);
    let mut ledger = AdLedger::new(vehicles);
    for g in sorted {
        let _ = ledger.offer(g);
    }
    (ledger.accepted, ledger.conflicts)
}
