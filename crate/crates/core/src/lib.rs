//! Photon statistics from time-tagged single-photon detections.
//!
//! Times are integer picoseconds throughout. The crate covers Monte Carlo
//! simulation of a two- or three-level emitter behind a realistic detection
//! chain, estimators (Mandel Q(T), photon-number distributions, g2
//! histograms, pulsed peak-area g2(0), lifetime histograms, trigger
//! filtering, deadtime estimation), closed-form models and their fits.

pub mod error;
pub mod fit;
pub mod format;
pub mod models;
pub mod report;
pub mod simulate;
pub mod stats;
pub mod stream;
pub mod types;

pub use error::{Error, Result};
pub use stream::{merge_channels, merge_detectors, partition_windows, window_count, DEFAULT_K_MAX};
pub use types::{
    Acquisition, DetectionChainParams, DetectionRecord, EmitterRates, ExcitationMode,
    RateConstants, Shelving, TimestampSeries, PS_PER_NS, PS_PER_S, TRIGGER_CHANNEL,
};
