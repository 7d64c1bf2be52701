//! Domain types shared by every module: detection records, acquisitions,
//! emitter lifetimes and detection-chain parameters.
//!
//! All times are integer picoseconds (`u64`). A 100 s acquisition is
//! 10^14 ps, well inside the `u64` range.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Picoseconds per second.
pub const PS_PER_S: f64 = 1e12;

/// Picoseconds per nanosecond.
pub const PS_PER_NS: u64 = 1_000;

/// Channel id reserved for laser trigger events.
pub const TRIGGER_CHANNEL: u8 = 0;

/// A single time-tagged event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub channel: u8,
    pub time: u64,
}

impl DetectionRecord {
    pub fn new(channel: u8, time: u64) -> Self {
        Self { channel, time }
    }

    /// Ordering key: time first, ties broken by ascending channel id.
    #[inline]
    pub fn sort_key(&self) -> (u64, u8) {
        (self.time, self.channel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ExcitationMode {
    Cw {
        power_uw: Option<f64>,
    },
    Pulsed {
        tau_rep: u64,
        trigger_channel: u8,
    },
}

impl ExcitationMode {
    pub fn cw() -> Self {
        ExcitationMode::Cw { power_uw: None }
    }

    pub fn pulsed(tau_rep: u64) -> Self {
        ExcitationMode::Pulsed {
            tau_rep,
            trigger_channel: TRIGGER_CHANNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ExcitationMode::Cw { power_uw } => match power_uw {
                Some(p) if !(p.is_finite() && p >= 0.0) => {
                    Err(Error::config(format!("power must be >= 0, got {p}")))
                }
                _ => Ok(()),
            },
            ExcitationMode::Pulsed { tau_rep, .. } if tau_rep == 0 => {
                Err(Error::config("pulse period tau_rep must be > 0"))
            }
            ExcitationMode::Pulsed { .. } => Ok(()),
        }
    }

    pub fn tau_rep(&self) -> Option<u64> {
        match *self {
            ExcitationMode::Pulsed { tau_rep, .. } => Some(tau_rep),
            ExcitationMode::Cw { .. } => None,
        }
    }

    pub fn trigger_channel(&self) -> Option<u8> {
        match *self {
            ExcitationMode::Pulsed {
                trigger_channel, ..
            } => Some(trigger_channel),
            ExcitationMode::Cw { .. } => None,
        }
    }

    pub fn is_pulsed(&self) -> bool {
        matches!(self, ExcitationMode::Pulsed { .. })
    }
}

/// One acquisition: a time-sorted stream of detection records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    duration: u64,
    records: Vec<DetectionRecord>,
    channels: BTreeSet<u8>,
    mode: ExcitationMode,
    seed: Option<u64>,
}

impl Acquisition {
    /// Builds an acquisition, sorting `records` by (time, channel).
    ///
    /// Fails if any record lies at or beyond `duration` or uses a channel
    /// outside `channels`.
    pub fn new(
        duration: u64,
        mut records: Vec<DetectionRecord>,
        channels: impl IntoIterator<Item = u8>,
        mode: ExcitationMode,
        seed: Option<u64>,
    ) -> Result<Self> {
        mode.validate()?;
        if duration == 0 {
            return Err(Error::InvalidAcquisition("duration must be > 0".into()));
        }
        let channels: BTreeSet<u8> = channels.into_iter().collect();
        if let Some(trig) = mode.trigger_channel() {
            if !channels.contains(&trig) {
                return Err(Error::InvalidAcquisition(format!(
                    "trigger channel {trig} not in channel set"
                )));
            }
        }
        for r in &records {
            if r.time >= duration {
                return Err(Error::InvalidAcquisition(format!(
                    "record at {} ps on channel {} is not before duration {} ps",
                    r.time, r.channel, duration
                )));
            }
            if !channels.contains(&r.channel) {
                return Err(Error::UnknownChannel(r.channel));
            }
        }
        if !records.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()) {
            records.sort_by_key(DetectionRecord::sort_key);
        }
        Ok(Self {
            duration,
            records,
            channels,
            mode,
            seed,
        })
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn records(&self) -> &[DetectionRecord] {
        &self.records
    }

    pub fn channels(&self) -> &BTreeSet<u8> {
        &self.channels
    }

    pub fn mode(&self) -> &ExcitationMode {
        &self.mode
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn trigger_channel(&self) -> Option<u8> {
        self.mode.trigger_channel()
    }

    /// Declared channels minus the trigger channel.
    pub fn detector_channels(&self) -> Vec<u8> {
        let trig = self.trigger_channel();
        self.channels
            .iter()
            .copied()
            .filter(|&c| Some(c) != trig)
            .collect()
    }

    /// Sorted trigger times, empty for CW acquisitions.
    pub fn triggers(&self) -> Vec<u64> {
        match self.trigger_channel() {
            Some(trig) => self.channel_times(trig),
            None => Vec::new(),
        }
    }

    pub fn channel_times(&self, channel: u8) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.channel == channel)
            .map(|r| r.time)
            .collect()
    }

    pub fn count(&self, channel: u8) -> usize {
        self.records.iter().filter(|r| r.channel == channel).count()
    }

    /// Same metadata, different records. Records must already satisfy the
    /// acquisition invariants.
    pub(crate) fn with_records(&self, records: Vec<DetectionRecord>) -> Self {
        debug_assert!(records.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));
        Self {
            duration: self.duration,
            records,
            channels: self.channels.clone(),
            mode: self.mode,
            seed: self.seed,
        }
    }
}

/// A sorted sequence of event times on a common time base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampSeries {
    times: Vec<u64>,
    duration: u64,
}

impl TimestampSeries {
    pub fn new(mut times: Vec<u64>, duration: u64) -> Result<Self> {
        if let Some(&last) = times.iter().max() {
            if last >= duration {
                return Err(Error::InvalidAcquisition(format!(
                    "time {last} ps is not before duration {duration} ps"
                )));
            }
        }
        if !times.windows(2).all(|w| w[0] <= w[1]) {
            times.sort_unstable();
        }
        Ok(Self { times, duration })
    }

    pub(crate) fn from_sorted(times: Vec<u64>, duration: u64) -> Self {
        debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        debug_assert!(times.last().is_none_or(|&t| t < duration));
        Self { times, duration }
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn into_times(self) -> Vec<u64> {
        self.times
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Mean event rate in Hz.
    pub fn rate_hz(&self) -> f64 {
        self.times.len() as f64 / (self.duration as f64 / PS_PER_S)
    }
}

/// Shelving branch of a three-level emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shelving {
    /// Excited to metastable lifetime, ps.
    pub tau23: f64,
    /// Metastable to ground lifetime, ps.
    pub tau31: f64,
}

/// Transition lifetimes of a two- or three-level emitter, in picoseconds.
///
/// Level 1 is the ground state, 2 the radiative excited state and 3 the
/// metastable shelving state. `shelving == None` is a two-level emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterRates {
    pub tau12: f64,
    pub tau21: f64,
    pub shelving: Option<Shelving>,
}

/// Transition rates `k_ij = 1/tau_ij` in 1/ps. `k23 == 0` means no shelving.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConstants {
    pub k12: f64,
    pub k21: f64,
    pub k23: f64,
    pub k31: f64,
}

fn check_lifetime(name: &str, tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be a positive finite lifetime, got {tau}")))
    }
}

impl EmitterRates {
    pub fn two_level(tau12: f64, tau21: f64) -> Result<Self> {
        let r = Self {
            tau12,
            tau21,
            shelving: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn three_level(tau12: f64, tau21: f64, tau23: f64, tau31: f64) -> Result<Self> {
        let r = Self {
            tau12,
            tau21,
            shelving: Some(Shelving { tau23, tau31 }),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        check_lifetime("tau12", self.tau12)?;
        check_lifetime("tau21", self.tau21)?;
        if let Some(s) = self.shelving {
            check_lifetime("tau23", s.tau23)?;
            check_lifetime("tau31", s.tau31)?;
        }
        Ok(())
    }

    pub fn is_three_level(&self) -> bool {
        self.shelving.is_some()
    }

    pub fn rate_constants(&self) -> RateConstants {
        let (k23, k31) = match self.shelving {
            Some(s) => (1.0 / s.tau23, 1.0 / s.tau31),
            None => (0.0, 0.0),
        };
        RateConstants {
            k12: 1.0 / self.tau12,
            k21: 1.0 / self.tau21,
            k23,
            k31,
        }
    }

    /// Probability that an excitation cycle ends radiatively,
    /// `k21 / (k21 + k23)`.
    pub fn radiative_fraction(&self) -> f64 {
        let k = self.rate_constants();
        k.k21 / (k.k21 + k.k23)
    }
}

/// Losses, beamsplitter, per-detector deadtime and background.
///
/// Index 0 of the per-channel arrays is detector channel 1, index 1 is
/// detector channel 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionChainParams {
    /// Total detection efficiency in [0, 1].
    pub efficiency: f64,
    /// Per-detector deadtime, ps.
    pub deadtime: [u64; 2],
    /// Probability that a surviving photon goes to channel 1.
    pub split_ratio: f64,
    /// Per-detector uniform background rate, Hz.
    pub background_hz: [f64; 2],
}

impl Default for DetectionChainParams {
    fn default() -> Self {
        Self {
            efficiency: 1.0,
            deadtime: [0, 0],
            split_ratio: 0.5,
            background_hz: [0.0, 0.0],
        }
    }
}

impl DetectionChainParams {
    /// Same deadtime and background on both detectors, 50:50 split.
    pub fn symmetric(efficiency: f64, deadtime: u64, background_hz: f64) -> Self {
        Self {
            efficiency,
            deadtime: [deadtime; 2],
            split_ratio: 0.5,
            background_hz: [background_hz; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::config(format!(
                "efficiency must lie in [0, 1], got {}",
                self.efficiency
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(format!(
                "split ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        for (i, &bg) in self.background_hz.iter().enumerate() {
            if !(bg.is_finite() && bg >= 0.0) {
                return Err(Error::config(format!(
                    "background rate on channel {} must be >= 0, got {bg}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acquisition_sorts_with_channel_tie_break() {
        let acq = Acquisition::new(
            100,
            vec![
                DetectionRecord::new(2, 7),
                DetectionRecord::new(1, 7),
                DetectionRecord::new(1, 3),
            ],
            [1, 2],
            ExcitationMode::cw(),
            None,
        )
        .unwrap();
        let keys: Vec<_> = acq.records().iter().map(|r| r.sort_key()).collect();
        assert_eq!(keys, vec![(3, 1), (7, 1), (7, 2)]);
    }

    #[test]
    fn acquisition_rejects_out_of_range() {
        let err = Acquisition::new(
            10,
            vec![DetectionRecord::new(1, 10)],
            [1],
            ExcitationMode::cw(),
            None,
        );
        assert!(err.is_err());
        let err = Acquisition::new(
            10,
            vec![DetectionRecord::new(3, 1)],
            [1],
            ExcitationMode::cw(),
            None,
        );
        assert!(matches!(err, Err(Error::UnknownChannel(3))));
    }

    #[test]
    fn pulsed_requires_trigger_channel_and_period() {
        assert!(Acquisition::new(10, vec![], [1, 2], ExcitationMode::pulsed(5), None).is_err());
        assert!(Acquisition::new(10, vec![], [0, 1], ExcitationMode::pulsed(0), None).is_err());
        let acq = Acquisition::new(10, vec![], [0, 1, 2], ExcitationMode::pulsed(5), None).unwrap();
        assert_eq!(acq.detector_channels(), vec![1, 2]);
    }

    #[test]
    fn lifetimes_validated() {
        assert!(EmitterRates::two_level(0.0, 1.0).is_err());
        assert!(EmitterRates::three_level(1.0, 1.0, f64::NAN, 1.0).is_err());
        let r = EmitterRates::three_level(205e3, 1.6e3, 1.4e3, 420e3).unwrap();
        assert!((r.radiative_fraction() - 1.4 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chain_validation() {
        assert!(DetectionChainParams::symmetric(1.5, 0, 0.0).validate().is_err());
        assert!(DetectionChainParams::symmetric(-0.1, 0, 0.0).validate().is_err());
        let mut c = DetectionChainParams::default();
        c.split_ratio = 1.0;
        assert!(c.validate().is_err());
        assert!(DetectionChainParams::symmetric(0.2, 80_000, 160.0).validate().is_ok());
    }
}
