use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum Error {
    /// The configuration is invalid or cannot be realised (e.g. the density
    /// does not fit on the road).
    #[error("configuration error: {0}")]
    Config(String),

    /// A global protocol invariant was violated during a run.
    #[error("invariant violated at {time}: {message}\n{trace}")]
    Invariant {
        time: SimTime,
        message: String,
        trace: String,
    },

    #[error("preset parse error: {0}")]
    Preset(#[from] toml::de::Error),

    #[error("preset serialization error: {0}")]
    PresetWrite(#[from] toml::ser::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
