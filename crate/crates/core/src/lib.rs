//! Simulation of a sub-6GHz-assisted mmWave V2V MAC and an 802.11ad-style
//! reference MAC on a ring highway.
//!
//! The crate is organised bottom-up: [`scenario`] (geometry and mobility),
//! [`sub6`] (beacons and channel load), the two MACs [`assisted`] and
//! [`ref_ad`], the event loop in [`engine`], and [`metrics`] over its
//! ledger. [`golden`] holds the two scripted examples, [`presets`] the named
//! configurations and [`calibrate`] the range calibration.

pub mod assisted;
pub mod calibrate;
pub mod engine;
pub mod error;
pub mod golden;
pub mod metrics;
pub mod presets;
pub mod ref_ad;
pub mod scenario;
pub mod sub6;
pub mod time;

pub use engine::{run, run_replication, MacKind, RunConfig, RunOutput};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use scenario::{ScenarioConfig, ScenarioState, VehicleId};
pub use time::SimTime;
