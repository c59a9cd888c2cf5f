//! Targeted discovery and allocation scenarios for the 802.11ad-style MAC.
//! Each discovery condition is flipped on its own against an idle baseline.

use std::collections::BTreeSet;

use mmwave_mac::ref_ad::{
    allocate_slots, discover, settle_grants, start_cycle, AdCycleConfig, AdLedger, BlindWindow, SlotGrant,
};
use mmwave_mac::scenario::{RoadGeometry, ScenarioState, VehicleId, VehicleState};
use mmwave_mac::time::SimTime;

const V: VehicleId = VehicleId(0);
const U: VehicleId = VehicleId(1);
const W: VehicleId = VehicleId(2);

fn ms(x: i64) -> SimTime {
    SimTime::from_millis(x)
}

fn car(i: u32, x: f64, lane: usize) -> VehicleState {
    VehicleState {
        id: VehicleId(i),
        lane,
        longitudinal_pos: x,
        speed: 0.0,
        length: 5.0,
        width: 2.0,
        is_mmwave_tx: false,
        beacon_phase: SimTime::ZERO,
    }
}

fn state(cars: Vec<VehicleState>) -> ScenarioState {
    let g = RoadGeometry {
        road_length: 1000.0,
        lane_width: 3.5,
        mmwave_los_range: 60.0,
        sub6_range: 300.0,
    };
    ScenarioState::new(SimTime::ZERO, g, cars).unwrap()
}

/// V at 100 runs its BHI over [0, 35.84); U sits 30 m ahead in the same
/// lane and W parks far away in lane 2.
fn baseline() -> ScenarioState {
    state(vec![car(0, 100.0, 0), car(1, 130.0, 0), car(2, 600.0, 2)])
}

fn run_discovery(s: &ScenarioState, ledger: &AdLedger) -> Vec<VehicleId> {
    let cfg = AdCycleConfig::default();
    let bhi = (SimTime::ZERO, cfg.bhi());
    let all: BTreeSet<VehicleId> = (0..s.len() as u32).map(VehicleId).filter(|&u| u != V).collect();
    discover(
        V,
        bhi,
        &s.view_at(bhi.0),
        &s.view_at(bhi.1),
        ledger,
        &all,
        cfg.max_neighbors,
    )
}

#[test]
fn idle_los_neighbor_is_discovered() {
    let s = baseline();
    assert_eq!(run_discovery(&s, &AdLedger::new(s.len())), vec![U]);
}

#[test]
fn losing_los_hides_the_neighbor() {
    // (i): a car parked between V and U blocks the path
    let s = state(vec![
        car(0, 100.0, 0),
        car(1, 130.0, 0),
        car(2, 600.0, 2),
        car(3, 115.0, 0),
    ]);
    assert!(!s.los(V, U));
    assert!(!run_discovery(&s, &AdLedger::new(s.len())).contains(&U));

    // (i) again: out of mmWave range
    let s = state(vec![car(0, 100.0, 0), car(1, 170.0, 0), car(2, 600.0, 2)]);
    assert!(run_discovery(&s, &AdLedger::new(s.len())).is_empty());
}

#[test]
fn busy_neighbor_is_missed() {
    // (ii): U is receiving from W during part of V's BHI
    let s = baseline();
    let mut ledger = AdLedger::new(s.len());
    let g = SlotGrant {
        tx: W,
        rx: U,
        start: ms(30),
        end: ms(80),
        bhi_end: ms(-10),
        cycle: 0,
        slot: 0,
    };
    ledger.offer(g).unwrap();
    assert!(run_discovery(&s, &ledger).is_empty());

    // a link that ends before the BHI does not matter
    let mut ledger = AdLedger::new(s.len());
    ledger
        .offer(SlotGrant {
            start: ms(-60),
            end: ms(-10),
            ..g
        })
        .unwrap();
    assert_eq!(run_discovery(&s, &ledger), vec![U]);
}

#[test]
fn neighbor_in_its_own_bhi_is_missed() {
    // (iii): U runs its own BHI starting 20 ms into V's
    let s = baseline();
    let cfg = AdCycleConfig::default();
    let mut ledger = AdLedger::new(s.len());
    ledger.record_cycle(U, ms(20), &cfg);
    assert!(run_discovery(&s, &ledger).is_empty());

    // with BHI-only blinding a BHI that closed before V's does not hide U
    let mut ledger = AdLedger::with_blind_window(s.len(), BlindWindow::Bhi);
    ledger.record_cycle(U, ms(-100), &cfg);
    assert_eq!(run_discovery(&s, &ledger), vec![U]);

    // with whole-cycle blinding it does, since U is still in its DTI
    let mut ledger = AdLedger::with_blind_window(s.len(), BlindWindow::Cycle);
    ledger.record_cycle(U, ms(-100), &cfg);
    assert!(run_discovery(&s, &ledger).is_empty());
}

#[test]
fn seven_idle_neighbors_keep_the_five_nearest() {
    let mut cars = vec![car(0, 500.0, 0)];
    // alternate ahead/behind in lanes 1..3 so nobody blocks anybody
    let spots = [
        (510.0, 1),
        (488.0, 2),
        (515.0, 3),
        (470.0, 1),
        (540.0, 2),
        (455.0, 3),
        (552.0, 1),
    ];
    for (i, &(x, lane)) in spots.iter().enumerate() {
        cars.push(car(i as u32 + 1, x, lane));
    }
    let s = state(cars);
    assert_eq!(s.los_neighbors(V), (1..=7).map(VehicleId).collect::<Vec<_>>());
    let found = run_discovery(&s, &AdLedger::new(s.len()));
    assert_eq!(found, [1, 2, 3, 4, 5].map(VehicleId).to_vec());
}

#[test]
fn carried_over_target_gets_slot_zero_next_cycle() {
    let cfg = AdCycleConfig::default();
    let d = VehicleId(3);
    let mut st = start_cycle(V, SimTime::ZERO, vec![U, W, d]);
    let grants = allocate_slots(&mut st, vec![d, U], &cfg);
    assert_eq!(grants.iter().map(|g| g.rx).collect::<Vec<_>>(), vec![d, U]);
    // D loses its slot to another transmitter, U is served
    settle_grants(&mut st, &[(grants[0], false), (grants[1], true)]);
    assert_eq!(st.carry_over, vec![d]);

    mmwave_mac::ref_ad::advance_cycle(&mut st, &cfg);
    let grants = allocate_slots(&mut st, vec![W, d], &cfg);
    assert_eq!(grants[0].rx, d);
    assert_eq!(grants[0].slot, 0);
    assert_eq!(grants[0].cycle, 1);
    assert_eq!(grants[0].start, cfg.cycle() + cfg.bhi());
    assert_eq!(grants[1].rx, W);
}
