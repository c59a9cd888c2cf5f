//! Simulation time.
//!
//! Time is an integer count of microseconds so every protocol constant used
//! here (35.84 ms control intervals, 50 ms slots, 100 ms beacons) is exact.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

/// A point in (or span of) simulated time, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub i64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: i64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: i64) -> Self {
        SimTime(ms * 1_000)
    }

    /// Rounds to the nearest microsecond.
    pub fn from_millis_f64(ms: f64) -> Self {
        SimTime((ms * 1_000.0).round() as i64)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    /// Non-negative remainder of `self` modulo `period`.
    pub fn rem_euclid(self, period: SimTime) -> SimTime {
        SimTime(self.0.rem_euclid(period.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl Mul<i64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: i64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 % 1_000 == 0 {
            write!(f, "{}ms", self.0 / 1_000)
        } else {
            write!(f, "{:.3}ms", self.as_millis_f64())
        }
    }
}

/// Half-open interval overlap test for `[a0, a1)` and `[b0, b1)`.
pub fn overlaps(a0: SimTime, a1: SimTime, b0: SimTime, b1: SimTime) -> bool {
    a0 < b1 && b0 < a1
}
