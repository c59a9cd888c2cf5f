//! Strategies, oracles and checks shared by the property targets and the
//! acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::TestRunner;

use mmwave_mac::assisted::{Reservation, ReservationBook};
use mmwave_mac::engine::{simulate, Activation, EventLog, MacKind, RunConfig, Setup};
use mmwave_mac::metrics::{sharing_times, SHARING_BINS};
use mmwave_mac::scenario::{RoadGeometry, ScenarioState, VehicleId, VehicleState};
use mmwave_mac::time::{overlaps, SimTime};

pub const CASES: u32 = 1000;

/// `(position, lane, speed, beacon phase ms)` per vehicle.
pub type Cells = Vec<(f64, usize, f64, i64)>;
/// `(10 m slot, lane, beacon phase ms, activation ms)` per vehicle.
pub type ReplayCells = Vec<(usize, usize, i64, Option<i64>)>;

pub fn ms(x: i64) -> SimTime {
    SimTime::from_millis(x)
}

fn ring_geometry(range: f64) -> RoadGeometry {
    RoadGeometry {
        road_length: 400.0,
        lane_width: 3.5,
        mmwave_los_range: range,
        sub6_range: 300.0,
    }
}

pub fn vehicle(i: usize, x: f64, lane: usize, speed: f64, phase_ms: i64) -> VehicleState {
    VehicleState {
        id: VehicleId(i as u32),
        lane,
        longitudinal_pos: x,
        speed,
        length: 5.0,
        width: 2.0,
        is_mmwave_tx: false,
        beacon_phase: ms(phase_ms),
    }
}

/// Up to `n` vehicles at distinct grid positions on a 400 m ring.
pub fn scene(n: usize) -> impl Strategy<Value = Cells> {
    prop::collection::btree_set((0usize..40, 0usize..4), 2..=n).prop_flat_map(|cells| {
        let k = cells.len();
        (
            Just(cells.into_iter().collect::<Vec<_>>()),
            prop::collection::vec(0.0..3.0f64, k),
            prop::collection::vec(0i64..100, k),
        )
            .prop_map(|(cells, jitter, phases)| {
                cells
                    .iter()
                    .zip(jitter)
                    .zip(phases)
                    .map(|(((slot, lane), j), p)| (*slot as f64 * 10.0 + j, *lane, 0.0, p))
                    .collect()
            })
    })
}

pub fn build(cells: &[(f64, usize, f64, i64)], range: f64) -> ScenarioState {
    let vs = cells
        .iter()
        .enumerate()
        .map(|(i, &(x, lane, speed, phase))| vehicle(i, x, lane, speed, phase))
        .collect();
    ScenarioState::new(SimTime::ZERO, ring_geometry(range), vs).unwrap()
}

/// Exact oracle: the optimum is `ref_time` or the end of some reservation.
pub fn earliest_start_oracle(book: &[Reservation], tx: VehicleId, rx: VehicleId, t: SimTime, dur: SimTime) -> SimTime {
    let mut cands: Vec<SimTime> = std::iter::once(t)
        .chain(book.iter().map(|r| r.end).filter(|&e| e >= t))
        .collect();
    cands.sort_unstable();
    cands
        .into_iter()
        .find(|&s| {
            book.iter()
                .filter(|r| r.involves(tx) || r.involves(rx))
                .all(|r| !overlaps(r.start, r.end, s, s + dur))
        })
        .expect("after the last end everything is free")
}

pub fn reservation() -> impl Strategy<Value = Reservation> {
    (0u32..6, 0u32..6, 0i64..500, 1i64..120)
        .prop_filter("distinct endpoints", |(a, b, _, _)| a != b)
        .prop_map(|(a, b, s, d)| Reservation::new(VehicleId(a), VehicleId(b), ms(s), ms(s + d)))
}

pub fn small_config() -> impl Strategy<Value = (RunConfig, u64)> {
    (
        prop_oneof![Just(MacKind::Assisted), Just(MacKind::RefAd)],
        150.0..400.0f64,
        40.0..160.0f64,
        0.1..0.5f64,
        0.0..1.0f64,
        any::<u64>(),
    )
        .prop_map(|(mac, road, density, r_tx, f, seed)| {
            // keep the sub-6 range wide enough for the assisted MAC's precondition
            let range = 10.0 + f * ((road / 2.5 - 9.0) / 2.0 - 10.0);
            let mut cfg = RunConfig::default();
            cfg.run.mac = mac;
            cfg.run.r_tx = r_tx;
            cfg.run.sim_duration_ms = 4000.0;
            cfg.scenario.road_length = road;
            cfg.scenario.sub6_range = road / 2.5;
            cfg.scenario.density = density;
            cfg.scenario.mmwave_los_range = range;
            cfg.ad.max_cycles = 4;
            (cfg, seed)
        })
}

// ---- brute-force sequential replay of the assisted handshake ----
//
// Every vehicle hears every beacon in these scenes, so all books hold the
// same grants and the replay keeps a single global list. Earliest starts are
// found by trying every candidate instant.

pub type Grant = (VehicleId, VehicleId, SimTime, SimTime);

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Idle,
    Queued,
    Announced,
    Closed,
}

struct Node {
    phase: Phase,
    targets: Vec<VehicleId>,
    awaiting: BTreeMap<VehicleId, SimTime>,
    first_rts: SimTime,
    pending: Vec<(SimTime, VehicleId)>,
}

fn busy(grants: &[Grant], v: VehicleId, s: SimTime, e: SimTime) -> bool {
    grants
        .iter()
        .any(|&(a, b, gs, ge)| (a == v || b == v) && gs < e && s < ge)
}

fn earliest(grants: &[Grant], tx: VehicleId, rx: VehicleId, t: SimTime, dur: SimTime) -> SimTime {
    let mut cands: Vec<SimTime> = grants.iter().map(|g| g.3).filter(|&e| e > t).collect();
    cands.push(t);
    cands.sort_unstable();
    cands
        .into_iter()
        .find(|&s| !busy(grants, tx, s, s + dur) && !busy(grants, rx, s, s + dur))
        .unwrap()
}

pub fn replay(state: &ScenarioState, acts: &[(VehicleId, SimTime)], cfg: &RunConfig, horizon: SimTime) -> Vec<Grant> {
    let n = state.len();
    let period = ms(cfg.sub6.beacon_period_ms as i64);
    let dur = ms(cfg.assisted.tx_dur_ms as i64);
    let retransmit = period * cfg.assisted.retransmit_after_periods as i64;
    let expire = period * cfg.assisted.expire_after_periods as i64;

    // (time, rank, subject): activations rank before beacons
    let mut events: Vec<(SimTime, u8, VehicleId)> = acts.iter().map(|&(v, t)| (t, 0, v)).collect();
    for v in 0..n {
        let id = VehicleId(v as u32);
        let mut t = state.vehicle(id).beacon_phase;
        while t <= horizon {
            events.push((t, 1, id));
            t += period;
        }
    }
    events.sort_unstable();

    let mut nodes: Vec<Node> = (0..n)
        .map(|_| Node {
            phase: Phase::Idle,
            targets: Vec::new(),
            awaiting: BTreeMap::new(),
            first_rts: SimTime::ZERO,
            pending: Vec::new(),
        })
        .collect();
    let mut grants: Vec<Grant> = Vec::new();
    let mut committed: Vec<Grant> = Vec::new();

    for (t, rank, v) in events {
        let me = v.index();
        if rank == 0 {
            let targets = state.los_neighbors(v);
            nodes[me].phase = if targets.is_empty() {
                Phase::Closed
            } else {
                Phase::Queued
            };
            nodes[me].targets = targets;
            continue;
        }
        let mut rts: Vec<VehicleId> = Vec::new();
        match nodes[me].phase {
            Phase::Queued => {
                let node = &mut nodes[me];
                node.awaiting = node.targets.iter().map(|&u| (u, t)).collect();
                node.first_rts = t;
                node.phase = Phase::Announced;
                rts = node.targets.clone();
            }
            Phase::Announced => {
                let node = &mut nodes[me];
                if t - node.first_rts > expire {
                    node.awaiting.clear();
                    node.phase = Phase::Closed;
                } else {
                    rts = node
                        .awaiting
                        .iter()
                        .filter(|(_, &at)| t - at > retransmit)
                        .map(|(&u, _)| u)
                        .collect();
                    for &u in &rts {
                        node.awaiting.insert(u, t);
                    }
                }
            }
            _ => {}
        }
        let mut cts: Vec<(VehicleId, SimTime)> = Vec::new();
        if rts.is_empty() && !nodes[me].pending.is_empty() {
            let mut pending = std::mem::take(&mut nodes[me].pending);
            pending.sort_unstable();
            for (_, tx) in pending {
                let repeat = grants
                    .iter()
                    .filter(|g| g.0 == tx && g.1 == v && g.2 >= t)
                    .map(|g| g.2)
                    .min();
                let s = repeat.unwrap_or_else(|| {
                    let s = earliest(&grants, tx, v, t, dur);
                    grants.push((tx, v, s, s + dur));
                    s
                });
                cts.push((tx, s));
            }
        }
        for u in &rts {
            let node = &mut nodes[u.index()];
            if !node.pending.iter().any(|p| p.1 == v) {
                node.pending.push((t, v));
            }
        }
        for &(tx, s) in &cts {
            let node = &mut nodes[tx.index()];
            if node.awaiting.remove(&v).is_some() {
                committed.push((tx, v, s, s + dur));
                if node.phase == Phase::Announced && node.awaiting.is_empty() {
                    node.phase = Phase::Closed;
                }
            }
        }
    }
    committed.sort_unstable();
    committed
}

fn replay_geometry() -> RoadGeometry {
    RoadGeometry {
        road_length: 400.0,
        lane_width: 3.5,
        mmwave_los_range: 60.0,
        sub6_range: 300.0,
    }
}

pub fn replay_scene() -> impl Strategy<Value = ReplayCells> {
    prop::collection::btree_set((0usize..40, 0usize..4), 2..=6).prop_flat_map(|cells| {
        let k = cells.len();
        (
            Just(cells.into_iter().collect::<Vec<_>>()),
            prop::collection::vec(0i64..100, k),
            prop::collection::vec(prop::option::weighted(0.6, 0i64..300), k),
        )
            .prop_map(|(cells, phases, acts)| {
                cells
                    .into_iter()
                    .zip(phases)
                    .zip(acts)
                    .map(|(((slot, lane), p), a)| (slot, lane, p, a))
                    .collect()
            })
    })
}

// ---- checks shared by the property targets and the acceptance suite ----

pub fn check_earliest_start(
    (book, tx, rx, t, dur): (Vec<Reservation>, u32, u32, i64, i64),
) -> Result<(), TestCaseError> {
    prop_assume!(tx != rx);
    let mut b = ReservationBook::new(VehicleId(rx));
    for r in &book {
        b.insert(*r);
    }
    let (tx, rx, t, dur) = (VehicleId(tx), VehicleId(rx), ms(t), ms(dur));
    let got = b.earliest_start(tx, rx, t, dur);
    prop_assert_eq!(got, earliest_start_oracle(b.reservations(), tx, rx, t, dur));
    let new = Reservation::new(tx, rx, got, got + dur);
    prop_assert!(b.reservations().iter().all(|r| !r.conflicts_with(&new)));
    Ok(())
}

pub fn earliest_start_input() -> impl Strategy<Value = (Vec<Reservation>, u32, u32, i64, i64)> {
    (
        prop::collection::vec(reservation(), 0..8),
        0u32..6,
        0u32..6,
        0i64..400,
        1i64..100,
    )
}

pub fn check_los((cells, extra, range): (Cells, (f64, usize), f64)) -> Result<(), TestCaseError> {
    let s = build(&cells, range);
    let n = s.len();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                prop_assert_eq!(
                    s.los(VehicleId(a as u32), VehicleId(b as u32)),
                    s.los(VehicleId(b as u32), VehicleId(a as u32))
                );
            }
        }
    }
    let mut more = cells.clone();
    more.push((extra.0, extra.1, 0.0, 0));
    let s2 = build(&more, range);
    for a in 0..n {
        for b in 0..n {
            if a != b {
                let (va, vb) = (VehicleId(a as u32), VehicleId(b as u32));
                prop_assert!(!s2.los(va, vb) || s.los(va, vb));
            }
        }
    }
    Ok(())
}

pub fn los_input() -> impl Strategy<Value = (Cells, (f64, usize), f64)> {
    (scene(7), (0.0..400.0f64, 0usize..4), 10.0..80.0f64)
}

pub fn check_histogram((iv, from, len): (Vec<(i64, i64)>, i64, i64)) -> Result<(), TestCaseError> {
    let intervals: Vec<(SimTime, SimTime)> = iv.iter().map(|&(s, d)| (ms(s), ms(s + d))).collect();
    let bins = sharing_times(&intervals, ms(from), ms(from + len));
    prop_assert_eq!(bins.len(), SHARING_BINS);
    prop_assert_eq!(bins.iter().sum::<i64>(), ms(len).as_micros());
    prop_assert!(bins.iter().all(|&b| b >= 0));
    Ok(())
}

pub fn histogram_input() -> impl Strategy<Value = (Vec<(i64, i64)>, i64, i64)> {
    (
        prop::collection::vec((0i64..2000, 1i64..300), 0..30),
        0i64..500,
        0i64..2000,
    )
}

/// Half-duplex on a random small highway, and identical ledgers on a rerun.
pub fn check_half_duplex_and_determinism((cfg, seed): (RunConfig, u64)) -> Result<(), TestCaseError> {
    let setup = || mmwave_mac::engine::prepare(&cfg, seed).unwrap();
    let (a, _) = simulate(&cfg, setup(), EventLog::disabled()).unwrap();
    prop_assert!(a.is_half_duplex());
    let (b, _) = simulate(&cfg, setup(), EventLog::disabled()).unwrap();
    prop_assert_eq!(a.entries, b.entries);
    Ok(())
}

pub fn check_static_progress((cells, tx_mask, act): (Cells, Vec<bool>, Vec<i64>)) -> Result<(), TestCaseError> {
    let s = build(&cells, 60.0);
    let mut cfg = RunConfig::default();
    cfg.run.mac = MacKind::Assisted;
    cfg.run.sim_duration_ms = 5000.0;
    let activations: Vec<Activation> = (0..s.len())
        .filter(|&i| tx_mask[i])
        .map(|i| Activation {
            vehicle: VehicleId(i as u32),
            at: ms(act[i]),
            pinned_targets: None,
        })
        .collect();
    let (ledger, _) = simulate(&cfg, Setup { state: s, activations }, EventLog::disabled()).unwrap();
    prop_assert!(ledger.is_half_duplex());
    for t in &ledger.transmitters {
        for rx in &t.targets {
            prop_assert!(
                ledger
                    .involving(t.id)
                    .any(|e| e.reservation.tx == t.id && e.reservation.rx == *rx),
                "{} never reached {}",
                t.id,
                rx
            );
        }
    }
    Ok(())
}

pub fn static_progress_input() -> impl Strategy<Value = (Cells, Vec<bool>, Vec<i64>)> {
    (
        scene(6),
        prop::collection::vec(any::<bool>(), 6),
        prop::collection::vec(0i64..300, 6),
    )
}

/// The engine's assisted ledger equals the sequential replay.
pub fn check_replay(cells: ReplayCells) -> Result<(), TestCaseError> {
    let vehicles: Vec<VehicleState> = cells
        .iter()
        .enumerate()
        .map(|(i, &(slot, lane, phase, _))| VehicleState {
            beacon_phase: ms(phase),
            ..vehicle(i, slot as f64 * 10.0, lane, 0.0, 0)
        })
        .collect();
    let state = ScenarioState::new(SimTime::ZERO, replay_geometry(), vehicles).unwrap();
    let acts: Vec<(VehicleId, SimTime)> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.3.map(|a| (VehicleId(i as u32), ms(a))))
        .collect();

    let mut cfg = RunConfig::default();
    cfg.run.mac = MacKind::Assisted;
    cfg.run.sim_duration_ms = 5000.0;
    let want = replay(&state, &acts, &cfg, ms(5000));

    let setup = Setup {
        state,
        activations: acts
            .iter()
            .map(|&(vehicle, at)| Activation {
                vehicle,
                at,
                pinned_targets: None,
            })
            .collect(),
    };
    let (ledger, _) = simulate(&cfg, setup, EventLog::disabled()).unwrap();
    let mut got: Vec<Grant> = ledger
        .entries
        .iter()
        .map(|e| {
            (
                e.reservation.tx,
                e.reservation.rx,
                e.reservation.start,
                e.reservation.end,
            )
        })
        .collect();
    got.sort_unstable();
    prop_assert_eq!(got, want);
    Ok(())
}

pub fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Runs every property with `cases` cases, reporting failures by name.
pub fn run_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    fn go<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
        TestRunner::new(config(cases)).run(&s, f).map_err(|e| e.to_string())
    }
    vec![
        (
            "half-duplex and determinism",
            go(cases, small_config(), check_half_duplex_and_determinism),
        ),
        (
            "static scenes: conflict-free, every target served",
            go(cases, static_progress_input(), check_static_progress),
        ),
        (
            "earliest_start vs exhaustive oracle",
            go(cases, earliest_start_input(), check_earliest_start),
        ),
        (
            "assisted ledger vs sequential replay",
            go(cases, replay_scene(), check_replay),
        ),
        (
            "LOS symmetry and blocker monotonicity",
            go(cases, los_input(), check_los),
        ),
        (
            "histogram time conservation",
            go(cases, histogram_input(), check_histogram),
        ),
    ]
}
