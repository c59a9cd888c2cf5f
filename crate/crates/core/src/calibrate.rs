//! Bisection of the mmWave range against a target mean LOS-neighbor count.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{generate_scenario, ScenarioConfig};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationSpec {
    pub target: f64,
    pub tolerance: f64,
    pub seeds: usize,
    pub lo: f64,
    pub hi: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            target: 5.5,
            tolerance: 0.1,
            seeds: 10,
            lo: 5.0,
            hi: 300.0,
            max_iterations: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub range: f64,
    pub mean_neighbors: f64,
    pub iterations: usize,
    /// (range, mean) of every probe in order.
    pub probes: Vec<(f64, f64)>,
}

/// Mean LOS-neighbor count over `seeds` generated scenes at `range`.
pub fn mean_los_neighbors(cfg: &ScenarioConfig, range: f64, seeds: usize) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.mmwave_los_range = range;
    let means = (0..seeds)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
            let s = generate_scenario(&cfg, 0.0, SimTime::from_millis(100), &mut rng)?;
            Ok(s.mean_los_neighbors())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(means.iter().sum::<f64>() / seeds.max(1) as f64)
}

/// Starts from the configured range; if that already meets the tolerance it
/// is returned after a single probe. Otherwise bisects over `[lo, hi]`.
pub fn calibrate(cfg: &ScenarioConfig, spec: &CalibrationSpec) -> Result<Calibration> {
    let within = |m: f64| (m - spec.target).abs() <= spec.tolerance;
    let mut probes = Vec::new();
    let mut probe = |r: f64| -> Result<f64> {
        let m = mean_los_neighbors(cfg, r, spec.seeds)?;
        debug!("range {r:.3} m -> {m:.3} LOS neighbors");
        probes.push((r, m));
        Ok(m)
    };
    let m0 = probe(cfg.mmwave_los_range)?;
    if within(m0) {
        return Ok(Calibration {
            range: cfg.mmwave_los_range,
            mean_neighbors: m0,
            iterations: 1,
            probes,
        });
    }
    let (mut lo, mut hi) = (spec.lo, spec.hi);
    let (f_lo, f_hi) = (probe(lo)?, probe(hi)?);
    if !(f_lo <= spec.target && spec.target <= f_hi) {
        return Err(Error::config(format!(
            "range bracket [{lo}, {hi}] m gives {f_lo:.3}..{f_hi:.3} LOS neighbors, which does not contain {}",
            spec.target
        )));
    }
    for _ in 0..spec.max_iterations {
        let mid = 0.5 * (lo + hi);
        let m = probe(mid)?;
        if within(m) {
            let iterations = probes.len();
            return Ok(Calibration {
                range: mid,
                mean_neighbors: m,
                iterations,
                probes,
            });
        }
        if m < spec.target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::config(format!(
        "no range within {} of {} after {} probes: {:?}",
        spec.tolerance, spec.target, spec.max_iterations, probes
    )))
}
