//! Scripted five-vehicle scenes replaying the two worked examples: the
//! assisted handshake timeline and the 802.11ad-style grant conflict.
//!
//! Vehicles are A, B, D, E, F (there is no C). All are parked so the
//! geometry is fixed. Beacon phases are A=10, B=20, E=40, D=50, F=70 ms.
//! Seen from A the distance order is B < F < E, from D it is E < F, and every
//! pair is in LOS.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{simulate, Activation, EventLog, GlobalLedger, MacKind, RunConfig, Setup};
use crate::error::{Error, Result};
use crate::scenario::{RoadGeometry, ScenarioState, VehicleId, VehicleState};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Script {
    Fig2,
    Fig3,
}

impl std::str::FromStr for Script {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2" => Ok(Script::Fig2),
            "fig3" => Ok(Script::Fig3),
            other => Err(Error::config(format!(
                "unknown golden scenario '{other}' (expected fig2 or fig3)"
            ))),
        }
    }
}

impl Script {
    pub fn name(self) -> &'static str {
        match self {
            Script::Fig2 => "fig2",
            Script::Fig3 => "fig3",
        }
    }

    pub fn mac(self) -> MacKind {
        match self {
            Script::Fig2 => MacKind::Assisted,
            Script::Fig3 => MacKind::RefAd,
        }
    }
}

pub const A: VehicleId = VehicleId(0);
pub const B: VehicleId = VehicleId(1);
pub const D: VehicleId = VehicleId(2);
pub const E: VehicleId = VehicleId(3);
pub const F: VehicleId = VehicleId(4);

pub fn label(v: VehicleId) -> String {
    match v.0 {
        0 => "A".into(),
        1 => "B".into(),
        2 => "D".into(),
        3 => "E".into(),
        4 => "F".into(),
        _ => v.to_string(),
    }
}

/// (vehicle, longitudinal position, lane, beacon phase in ms)
const LAYOUT: [(VehicleId, f64, usize, i64); 5] = [
    (A, 100.0, 1, 10),
    (B, 108.0, 2, 20),
    (D, 150.0, 1, 50),
    (E, 130.0, 2, 40),
    (F, 120.0, 0, 70),
];

pub fn scene(cfg: &RunConfig) -> Result<ScenarioState> {
    let vehicles = LAYOUT
        .iter()
        .map(|&(id, x, lane, phase)| VehicleState {
            id,
            lane,
            longitudinal_pos: x,
            speed: 0.0,
            length: cfg.scenario.vehicle_length,
            width: cfg.scenario.vehicle_width,
            is_mmwave_tx: id == A || id == D,
            beacon_phase: SimTime::from_millis(phase),
        })
        .collect();
    ScenarioState::new(SimTime::ZERO, RoadGeometry::from_config(&cfg.scenario), vehicles)
}

/// A activates at 0 and D at 20 ms. In the handshake example D only wants
/// to reach F.
pub fn setup(script: Script, cfg: &RunConfig) -> Result<Setup> {
    let d_targets = match script {
        Script::Fig2 => Some(vec![F]),
        Script::Fig3 => None,
    };
    Ok(Setup {
        state: scene(cfg)?,
        activations: vec![
            Activation {
                vehicle: A,
                at: SimTime::ZERO,
                pinned_targets: None,
            },
            Activation {
                vehicle: D,
                at: SimTime::from_millis(20),
                pinned_targets: d_targets,
            },
        ],
    })
}

/// Configuration of a scripted run: defaults with the script's MAC.
pub fn config(script: Script) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.mac = script.mac();
    cfg.run.script = Some(script);
    cfg.run.replications = 1;
    cfg.run.min_replications = 1;
    cfg.scenario.mmwave_los_range = 100.0;
    cfg
}

/// Expected handshake ledger as `(tx, rx, start_ms, end_ms)`.
pub fn expected_fig2() -> Vec<(VehicleId, VehicleId, i64, i64)> {
    vec![
        (A, B, 20, 70),
        (A, E, 70, 120),
        (D, F, 70, 120),
        (A, F, 120, 170),
        (A, D, 170, 220),
    ]
}

#[derive(Debug, Clone)]
pub struct GoldenReport {
    pub script: Script,
    pub passed: bool,
    /// One line per check, prefixed with `ok` or `FAIL`.
    pub checks: Vec<String>,
    /// Line diff of the ledger against the expectation (empty when equal).
    pub diff: String,
    pub ledger: GlobalLedger,
    pub log: EventLog,
}

impl GoldenReport {
    fn check(&mut self, ok: bool, what: String) {
        self.passed &= ok;
        self.checks.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn fmt_reservation(tx: VehicleId, rx: VehicleId, s: SimTime, e: SimTime) -> String {
    format!("{}->{} [{}, {})", label(tx), label(rx), s, e)
}

fn fmt_set(vs: &[VehicleId]) -> String {
    let names: Vec<String> = vs.iter().map(|&v| label(v)).collect();
    format!("{{{}}}", names.join(","))
}

/// `-` lines are expected but missing, `+` lines are present but unexpected.
pub fn line_diff(expected: &[String], actual: &[String]) -> String {
    let want: BTreeSet<&String> = expected.iter().collect();
    let got: BTreeSet<&String> = actual.iter().collect();
    let mut out = String::new();
    if want == got {
        return out;
    }
    let _ = writeln!(out, "--- expected\n+++ actual");
    for l in want.union(&got) {
        let tag = match (want.contains(l), got.contains(l)) {
            (true, true) => ' ',
            (true, false) => '-',
            _ => '+',
        };
        let _ = writeln!(out, "{tag}{l}");
    }
    out
}

/// Replays `script` and compares it with the worked example.
pub fn run_golden(script: Script, trace_cap: Option<usize>) -> Result<GoldenReport> {
    let cfg = config(script);
    let (ledger, log) = simulate(&cfg, setup(script, &cfg)?, EventLog::enabled(trace_cap))?;
    let mut report = GoldenReport {
        script,
        passed: true,
        checks: Vec::new(),
        diff: String::new(),
        ledger,
        log,
    };
    let actual: Vec<String> = report
        .ledger
        .entries
        .iter()
        .map(|e| {
            let r = e.reservation;
            fmt_reservation(r.tx, r.rx, r.start, r.end)
        })
        .collect();
    match script {
        Script::Fig2 => {
            let expected: Vec<String> = expected_fig2()
                .into_iter()
                .map(|(tx, rx, s, e)| fmt_reservation(tx, rx, SimTime::from_millis(s), SimTime::from_millis(e)))
                .collect();
            report.diff = line_diff(&expected, &actual);
            let exact = report.diff.is_empty() && actual.len() == expected.len();
            report.check(
                exact,
                format!("ledger matches the {} expected reservations", expected.len()),
            );
            let a_bytes = report.ledger.round_bytes.get(&A).copied().unwrap_or(0);
            report.check(
                a_bytes == 64,
                format!("A's round costs {a_bytes} extension bytes (expected 64)"),
            );
        }
        Script::Fig3 => {
            let first = |v: VehicleId| {
                report
                    .ledger
                    .cycles
                    .iter()
                    .find(|c| c.tx == v && c.cycle == 0)
                    .map(|c| c.discovered.clone())
                    .unwrap_or_default()
            };
            let (da, dd) = (first(A), first(D));
            let set = |v: &[VehicleId]| v.iter().copied().collect::<BTreeSet<_>>();
            report.check(
                set(&da) == set(&[B, F, E]),
                format!("A discovers {} (expected {{B,F,E}})", fmt_set(&da)),
            );
            report.check(
                set(&dd) == set(&[E, F]),
                format!("D discovers {} (expected {{E,F}})", fmt_set(&dd)),
            );
            let conflicts: Vec<String> = report
                .ledger
                .conflicts
                .iter()
                .map(|c| {
                    format!(
                        "at {}: {} beats {}",
                        label(c.at),
                        fmt_reservation(c.winner.tx, c.winner.rx, c.winner.start, c.winner.end),
                        fmt_reservation(c.loser.tx, c.loser.rx, c.loser.start, c.loser.end)
                    )
                })
                .collect();
            let at_f = report.ledger.conflicts.iter().filter(|c| c.at == F).count();
            report.check(
                at_f == 1 && report.ledger.conflicts.len() == 1,
                format!("one grant conflict at F ({})", conflicts.join("; ")),
            );
        }
    }
    report.check(report.ledger.is_half_duplex(), "ledger is half-duplex".into());
    Ok(report)
}
