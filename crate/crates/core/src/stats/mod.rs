//! Estimators over timestamp data.

pub mod deadtime;
pub mod g2;
pub mod mandel;
pub mod pulsed;

pub use deadtime::{estimate_deadtime, DeadtimeEstimate, DeadtimeParams};
pub use g2::{g2_histogram_cw, log_edges, Binning, CorrelationHistogram};
pub use mandel::{
    mandel_q, mandel_q_series, photon_number_distribution, window_origin, MandelQ,
    PhotonNumberDistribution, QEntry, QOptions, QSeries,
};
pub use pulsed::{
    filter_width_sweep, g2_zero_pulsed, lifetime_histogram, trigger_filter, LifetimeHistogram,
    PulsedG2Zero, SweepPoint,
};
