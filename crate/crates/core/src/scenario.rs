//! Highway scenario: vehicle placement, ring-road mobility and the geometric
//! queries (LOS, mmWave neighbors, sub-6GHz range) every MAC decision is
//! built on.
//!
//! The road is a ring of `road_length` meters. Longitudinal coordinates wrap,
//! lateral coordinates are lane centers. Every vehicle is an axis-aligned
//! rectangle with its antenna at the geometric center; a link is in line of
//! sight when the segment between two centers touches no other footprint.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::SimTime;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Vehicle identifier. In a [`ScenarioState`] ids are dense: vehicle `i`
/// lives at index `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl VehicleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Ring length in meters.
    pub road_length: f64,
    pub lane_count: usize,
    pub lane_width: f64,
    /// Vehicles per km, summed over all lanes.
    pub density: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Constant speed of each lane in m/s; one entry per lane.
    pub lane_speeds: Vec<f64>,
    pub mmwave_los_range: f64,
    pub sub6_range: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            road_length: 4000.0,
            lane_count: 4,
            lane_width: 3.5,
            density: 125.0,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            lane_speeds: vec![33.0, 30.0, 27.0, 24.0],
            mmwave_los_range: crate::presets::CALIBRATED_RANGE_125,
            sub6_range: 300.0,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("road_length", self.road_length),
            ("lane_width", self.lane_width),
            ("density", self.density),
            ("vehicle_length", self.vehicle_length),
            ("vehicle_width", self.vehicle_width),
            ("mmwave_los_range", self.mmwave_los_range),
            ("sub6_range", self.sub6_range),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {value}")));
            }
        }
        if self.lane_count == 0 {
            return Err(Error::config("lane_count must be >= 1"));
        }
        if self.lane_speeds.len() != self.lane_count {
            return Err(Error::config(format!(
                "lane_speeds has {} entries for {} lanes",
                self.lane_speeds.len(),
                self.lane_count
            )));
        }
        if self.mmwave_los_range > self.sub6_range {
            return Err(Error::config(format!(
                "mmwave_los_range ({}) must not exceed sub6_range ({})",
                self.mmwave_los_range, self.sub6_range
            )));
        }
        if self.vehicle_width >= self.lane_width {
            return Err(Error::config("vehicle_width must be smaller than lane_width"));
        }
        if 2.0 * self.sub6_range >= self.road_length {
            return Err(Error::config("road_length must exceed twice the sub6_range"));
        }
        Ok(())
    }

    pub fn vehicle_count(&self) -> usize {
        (self.density * self.road_length / 1000.0).floor() as usize
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub lane: usize,
    /// Meters along the ring, in `[0, road_length)`.
    pub longitudinal_pos: f64,
    /// Meters per second.
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub is_mmwave_tx: bool,
    /// Offset of this vehicle's beacon train within the beacon period.
    pub beacon_phase: SimTime,
}

/// Road-level constants the geometric queries need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub road_length: f64,
    pub lane_width: f64,
    pub mmwave_los_range: f64,
    pub sub6_range: f64,
}

impl RoadGeometry {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        RoadGeometry {
            road_length: cfg.road_length,
            lane_width: cfg.lane_width,
            mmwave_los_range: cfg.mmwave_los_range,
            sub6_range: cfg.sub6_range,
        }
    }

    /// Signed longitudinal offset from `from` to `to`, in `[-L/2, L/2)`.
    pub fn wrap_delta(&self, from: f64, to: f64) -> f64 {
        let l = self.road_length;
        let d = (to - from).rem_euclid(l);
        if d >= l / 2.0 {
            d - l
        } else {
            d
        }
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }
}

/// Snapshot of all vehicles at `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioState {
    pub time: SimTime,
    pub geometry: RoadGeometry,
    pub vehicles: Vec<VehicleState>,
    #[serde(skip)]
    index: SortedIndex,
}

/// Vehicle indices sorted by longitudinal position.
#[derive(Debug, Clone, Default, PartialEq)]
struct SortedIndex {
    order: Vec<u32>,
    positions: Vec<f64>,
    max_half_len: f64,
    max_abs_speed: f64,
}

impl SortedIndex {
    fn build(vehicles: &[VehicleState]) -> Self {
        let mut order: Vec<u32> = (0..vehicles.len() as u32).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (&vehicles[a as usize], &vehicles[b as usize]);
            va.longitudinal_pos
                .total_cmp(&vb.longitudinal_pos)
                .then(va.id.cmp(&vb.id))
        });
        let positions = order.iter().map(|&i| vehicles[i as usize].longitudinal_pos).collect();
        let max_half_len = vehicles.iter().map(|v| v.length.max(v.width) / 2.0).fold(0.0, f64::max);
        let max_abs_speed = vehicles.iter().map(|v| v.speed.abs()).fold(0.0, f64::max);
        SortedIndex {
            order,
            positions,
            max_half_len,
            max_abs_speed,
        }
    }
}

impl ScenarioState {
    /// Builds a state from explicit vehicles. Ids must be dense (`vehicles[i].id == i`).
    pub fn new(time: SimTime, geometry: RoadGeometry, vehicles: Vec<VehicleState>) -> Result<Self> {
        for (i, v) in vehicles.iter().enumerate() {
            if v.id.index() != i {
                return Err(Error::config(format!(
                    "vehicle ids must be dense: index {i} holds {}",
                    v.id
                )));
            }
            if !(0.0..geometry.road_length).contains(&v.longitudinal_pos) {
                return Err(Error::config(format!(
                    "{} position {} outside [0, {})",
                    v.id, v.longitudinal_pos, geometry.road_length
                )));
            }
        }
        let index = SortedIndex::build(&vehicles);
        Ok(ScenarioState {
            time,
            geometry,
            vehicles,
            index,
        })
    }

    pub fn vehicle(&self, id: VehicleId) -> &VehicleState {
        &self.vehicles[id.index()]
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn transmitters(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.iter().filter(|v| v.is_mmwave_tx)
    }

    /// Advances every vehicle by `speed × dt` along its lane, wrapping at the
    /// ring end. Panics if `dt` is not positive.
    pub fn step_mobility(&self, dt: SimTime) -> ScenarioState {
        assert!(dt > SimTime::ZERO, "step_mobility requires dt > 0, got {dt}");
        let secs = dt.as_secs_f64();
        let l = self.geometry.road_length;
        let vehicles: Vec<VehicleState> = self
            .vehicles
            .iter()
            .map(|v| VehicleState {
                longitudinal_pos: wrap_pos(v.longitudinal_pos + v.speed * secs, l),
                ..v.clone()
            })
            .collect();
        let index = SortedIndex::build(&vehicles);
        ScenarioState {
            time: self.time + dt,
            geometry: self.geometry.clone(),
            vehicles,
            index,
        }
    }

    /// Geometry as seen at `t`, interpolated from this snapshot without copying it.
    pub fn view_at(&self, t: SimTime) -> ScenarioView<'_> {
        let dt = (t - self.time).as_secs_f64();
        ScenarioView {
            state: self,
            dt,
            margin: self.index.max_abs_speed * dt.abs() + 1e-9,
        }
    }

    fn view(&self) -> ScenarioView<'_> {
        self.view_at(self.time)
    }

    pub fn los(&self, a: VehicleId, b: VehicleId) -> bool {
        self.view().los(a, b)
    }

    pub fn los_neighbors(&self, v: VehicleId) -> Vec<VehicleId> {
        self.view().los_neighbors(v)
    }

    pub fn in_sub6_range(&self, a: VehicleId, b: VehicleId) -> bool {
        self.view().in_sub6_range(a, b)
    }

    pub fn ring_distance(&self, a: VehicleId, b: VehicleId) -> f64 {
        self.view().ring_distance(a, b)
    }

    /// Mean size of the LOS neighbor set over all vehicles.
    pub fn mean_los_neighbors(&self) -> f64 {
        if self.vehicles.is_empty() {
            return 0.0;
        }
        let view = self.view();
        let total: usize = self.vehicles.iter().map(|v| view.los_neighbors(v.id).len()).sum();
        total as f64 / self.vehicles.len() as f64
    }
}

fn wrap_pos(x: f64, l: f64) -> f64 {
    let w = x.rem_euclid(l);
    // rem_euclid can round up to exactly l for tiny negative inputs.
    if w >= l {
        0.0
    } else {
        w
    }
}

/// Read-only geometric view of a [`ScenarioState`] at a given instant.
#[derive(Clone, Copy)]
pub struct ScenarioView<'a> {
    state: &'a ScenarioState,
    dt: f64,
    margin: f64,
}

impl<'a> ScenarioView<'a> {
    pub fn state(&self) -> &'a ScenarioState {
        self.state
    }

    pub fn position(&self, id: VehicleId) -> f64 {
        let v = self.state.vehicle(id);
        if self.dt == 0.0 {
            v.longitudinal_pos
        } else {
            wrap_pos(v.longitudinal_pos + v.speed * self.dt, self.state.geometry.road_length)
        }
    }

    fn lateral(&self, id: VehicleId) -> f64 {
        self.state.geometry.lane_center(self.state.vehicle(id).lane)
    }

    /// Euclidean distance with the longitudinal component taken the short way round.
    pub fn ring_distance(&self, a: VehicleId, b: VehicleId) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let dx = self.state.geometry.wrap_delta(self.position(a), self.position(b));
        let dy = self.lateral(b) - self.lateral(a);
        dx.hypot(dy)
    }

    /// Calls `f` for every vehicle whose longitudinal offset from `origin`
    /// may lie in `[lo, hi]` (a superset; callers filter exactly).
    fn for_each_candidate(&self, origin: f64, lo: f64, hi: f64, mut f: impl FnMut(VehicleId)) {
        let idx = &self.state.index;
        let n = idx.order.len();
        if n == 0 {
            return;
        }
        let l = self.state.geometry.road_length;
        // Snapshot positions are shifted by speed*dt relative to the view.
        let lo = lo - self.margin;
        let hi = hi + self.margin;
        if hi - lo >= l {
            for &i in &idx.order {
                f(VehicleId(i));
            }
            return;
        }
        let start = wrap_pos(origin + lo, l);
        let span = hi - lo;
        let first = idx.positions.partition_point(|&p| p < start);
        for k in 0..n {
            let slot = (first + k) % n;
            let p = idx.positions[slot];
            let off = (p - start).rem_euclid(l);
            if off > span {
                break;
            }
            f(VehicleId(idx.order[slot]));
        }
    }

    /// Whether the straight segment between the centers of `a` and `b`
    /// touches no other vehicle's footprint.
    pub fn los(&self, a: VehicleId, b: VehicleId) -> bool {
        assert_ne!(a, b, "los is undefined for a vehicle with itself");
        // Evaluate from the lower id so the result is exactly symmetric.
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let geo = &self.state.geometry;
        let xa = self.position(a);
        let dx = geo.wrap_delta(xa, self.position(b));
        let p0 = (0.0, self.lateral(a));
        let p1 = (dx, self.lateral(b));
        let half = self.state.index.max_half_len;
        let (lo, hi) = (dx.min(0.0) - half, dx.max(0.0) + half);
        let mut clear = true;
        self.for_each_candidate(xa, lo, hi, |w| {
            if !clear || w == a || w == b {
                return;
            }
            let wx = geo.wrap_delta(xa, self.position(w));
            let veh = self.state.vehicle(w);
            let wy = self.lateral(w);
            let rect = Rect {
                min: (wx - veh.length / 2.0, wy - veh.width / 2.0),
                max: (wx + veh.length / 2.0, wy + veh.width / 2.0),
            };
            if segment_intersects_rect(p0, p1, &rect) {
                clear = false;
            }
        });
        clear
    }

    /// Vehicles within mmWave range of `v` and in LOS, sorted by id.
    pub fn los_neighbors(&self, v: VehicleId) -> Vec<VehicleId> {
        let range = self.state.geometry.mmwave_los_range;
        let mut out = Vec::new();
        self.for_each_candidate(self.position(v), -range, range, |u| {
            if u != v && self.ring_distance(v, u) <= range && self.los(v, u) {
                out.push(u);
            }
        });
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Closed-disc sub-6GHz reachability.
    pub fn in_sub6_range(&self, a: VehicleId, b: VehicleId) -> bool {
        assert_ne!(a, b, "in_sub6_range is undefined for a vehicle with itself");
        self.ring_distance(a, b) <= self.state.geometry.sub6_range
    }

    /// Every other vehicle within sub-6GHz range of `v`, sorted by id.
    pub fn sub6_neighbors(&self, v: VehicleId) -> Vec<VehicleId> {
        let range = self.state.geometry.sub6_range;
        let mut out = Vec::new();
        self.for_each_candidate(self.position(v), -range, range, |u| {
            if u != v && self.ring_distance(v, u) <= range {
                out.push(u);
            }
        });
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Axis-aligned rectangle, closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: (f64, f64),
    pub max: (f64, f64),
}

/// Liang–Barsky clip of the closed segment `p0..p1` against a closed rectangle.
pub fn segment_intersects_rect(p0: (f64, f64), p1: (f64, f64), rect: &Rect) -> bool {
    let d = (p1.0 - p0.0, p1.1 - p0.1);
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    let checks = [
        (-d.0, p0.0 - rect.min.0),
        (d.0, rect.max.0 - p0.0),
        (-d.1, p0.1 - rect.min.1),
        (d.1, rect.max.1 - p0.1),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Places `⌊density × road_length / 1000⌋` vehicles uniformly at random, flags
/// `round(r_tx × n)` of them as mmWave transmitters and draws beacon phases
/// uniformly in `[0, beacon_period)`.
pub fn generate_scenario<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    r_tx: f64,
    beacon_period: SimTime,
    rng: &mut R,
) -> Result<ScenarioState> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&r_tx) {
        return Err(Error::config(format!("r_tx must be in [0, 1], got {r_tx}")));
    }
    if beacon_period <= SimTime::ZERO {
        return Err(Error::config("beacon_period must be > 0"));
    }
    let n = cfg.vehicle_count();
    let l = cfg.road_length;
    let min_spacing = 2.0 * cfg.vehicle_length;
    let mut lanes: Vec<Vec<f64>> = vec![Vec::new(); cfg.lane_count];
    let mut placed: Vec<(usize, f64)> = Vec::with_capacity(n);
    for k in 0..n {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let lane = rng.gen_range(0..cfg.lane_count);
            let pos = rng.gen_range(0.0..l);
            let occupied = &lanes[lane];
            let at = occupied.partition_point(|&p| p < pos);
            let m = occupied.len();
            let clear = m == 0 || {
                let next = occupied[at % m];
                let prev = occupied[(at + m - 1) % m];
                (next - pos).rem_euclid(l) >= min_spacing && (pos - prev).rem_euclid(l) >= min_spacing
            };
            if clear {
                lanes[lane].insert(at, pos);
                placed.push((lane, pos));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::config(format!(
                "could not place vehicle {k} of {n} after {MAX_PLACEMENT_ATTEMPTS} attempts; \
                 density {} /km is infeasible for this road",
                cfg.density
            )));
        }
    }

    let tx_count = (r_tx * n as f64).round() as usize;
    let mut is_tx = vec![false; n];
    for i in sample(rng, n, tx_count.min(n)).iter() {
        is_tx[i] = true;
    }

    let vehicles = placed
        .into_iter()
        .enumerate()
        .map(|(i, (lane, pos))| VehicleState {
            id: VehicleId(i as u32),
            lane,
            longitudinal_pos: pos,
            speed: cfg.lane_speeds[lane],
            length: cfg.vehicle_length,
            width: cfg.vehicle_width,
            is_mmwave_tx: is_tx[i],
            beacon_phase: SimTime(rng.gen_range(0..beacon_period.as_micros())),
        })
        .collect();
    ScenarioState::new(SimTime::ZERO, RoadGeometry::from_config(cfg), vehicles)
}
