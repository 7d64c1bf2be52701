//! Kinetic Monte Carlo emission for a two- or three-level emitter and the
//! detection chain (loss thinning, beamsplitter, background, deadtime).
//!
//! Every random stage draws from its own ChaCha8 stream derived from the
//! run seed, so switching one stage on or off never shifts the draws of
//! another. Changing the deadtime, for example, leaves emissions, thinning
//! and splitting untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    Acquisition, DetectionChainParams, DetectionRecord, EmitterRates, ExcitationMode,
    TimestampSeries, PS_PER_S,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Stage {
    Excitation = 1,
    Radiative = 2,
    Shelving = 3,
    Thinning = 4,
    Splitting = 5,
    Background1 = 6,
    Background2 = 7,
    Injection = 8,
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

#[inline]
fn exp(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    mean * e
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub rates: EmitterRates,
    pub chain: DetectionChainParams,
    pub mode: ExcitationMode,
    /// Acquisition length, ps.
    pub duration: u64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        self.chain.validate()?;
        self.mode.validate()?;
        if self.duration == 0 {
            return Err(Error::config("duration must be > 0"));
        }
        Ok(())
    }
}

/// Emission times before detection, plus trigger times for pulsed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions {
    pub photons: TimestampSeries,
    pub triggers: Vec<u64>,
    pub mode: ExcitationMode,
    /// Excitation cycles started inside the acquisition.
    pub cycles: u64,
    /// Cycles that ended by photon emission (including one possibly
    /// truncated by the end of the acquisition).
    pub radiative_cycles: u64,
}

struct Emitter {
    rates: EmitterRates,
    excitation: ChaCha8Rng,
    radiative: ChaCha8Rng,
    shelving: ChaCha8Rng,
}

enum Decay {
    Radiative(f64),
    Shelved(f64),
}

impl Emitter {
    fn new(rates: EmitterRates, seed: u64) -> Self {
        Self {
            rates,
            excitation: stage_rng(seed, Stage::Excitation),
            radiative: stage_rng(seed, Stage::Radiative),
            shelving: stage_rng(seed, Stage::Shelving),
        }
    }

    fn excitation_delay(&mut self) -> f64 {
        exp(&mut self.excitation, self.rates.tau12)
    }

    /// Competing decays out of the excited state.
    fn decay(&mut self) -> Decay {
        let t21 = exp(&mut self.radiative, self.rates.tau21);
        match self.rates.shelving {
            None => Decay::Radiative(t21),
            Some(s) => {
                let t23 = exp(&mut self.shelving, s.tau23);
                if t21 < t23 {
                    Decay::Radiative(t21)
                } else {
                    let t31 = exp(&mut self.shelving, s.tau31);
                    Decay::Shelved(t23 + t31)
                }
            }
        }
    }
}

/// Pushes `t` (continuous ps) as an integer time, keeping the output strictly
/// increasing. Returns false once the acquisition end is reached.
#[inline]
fn push_emission(out: &mut Vec<u64>, t: f64, duration: u64) -> bool {
    if t >= duration as f64 {
        return false;
    }
    let mut ts = t as u64;
    if let Some(&last) = out.last() {
        if ts <= last {
            ts = last + 1;
        }
    }
    if ts >= duration {
        return false;
    }
    out.push(ts);
    true
}

/// Continuous-wave emission: excite from ground after Exp(tau12), then race
/// the radiative decay against shelving; shelved cycles return to ground
/// after Exp(tau31) without emitting.
pub fn simulate_emission_cw(rates: &EmitterRates, duration: u64, seed: u64) -> Result<Emissions> {
    rates.validate()?;
    if duration == 0 {
        return Err(Error::config("duration must be > 0"));
    }
    let mut em = Emitter::new(*rates, seed);
    let end = duration as f64;
    let mut photons = Vec::with_capacity(expected_cw_photons(rates, duration));
    let (mut cycles, mut radiative) = (0u64, 0u64);
    let mut t = 0.0f64;
    loop {
        t += em.excitation_delay();
        if t >= end {
            break;
        }
        cycles += 1;
        match em.decay() {
            Decay::Radiative(dt) => {
                radiative += 1;
                t += dt;
                if !push_emission(&mut photons, t, duration) {
                    break;
                }
            }
            Decay::Shelved(dt) => t += dt,
        }
    }
    Ok(Emissions {
        photons: TimestampSeries::from_sorted(photons, duration),
        triggers: Vec::new(),
        mode: ExcitationMode::cw(),
        cycles,
        radiative_cycles: radiative,
    })
}

fn expected_cw_photons(rates: &EmitterRates, duration: u64) -> usize {
    let p = rates.radiative_fraction();
    let shelf = rates.shelving.map_or(0.0, |s| (1.0 - p) * s.tau31);
    let cycle = rates.tau12 + rates.tau21 * p + shelf;
    ((duration as f64 / cycle) * p * 1.05).min(1e9) as usize
}

/// Pulsed emission with instantaneous pulses at `0, tau_rep, 2 tau_rep, ...`.
///
/// The emitter is excited `Exp(tau12)` after the first pulse at or after its
/// return to ground; pulses arriving while it is excited or shelved are
/// ignored, so each cycle emits at most one photon.
pub fn simulate_emission_pulsed(
    rates: &EmitterRates,
    tau_rep: u64,
    duration: u64,
    seed: u64,
) -> Result<Emissions> {
    rates.validate()?;
    if tau_rep == 0 {
        return Err(Error::config("tau_rep must be > 0"));
    }
    if duration == 0 {
        return Err(Error::config("duration must be > 0"));
    }
    let mut em = Emitter::new(*rates, seed);
    let mut photons = Vec::new();
    let (mut cycles, mut radiative) = (0u64, 0u64);
    let rep = tau_rep as f64;
    let mut ground = 0.0f64;
    loop {
        let pulse_index = (ground / rep).ceil() as u64;
        let Some(pulse) = pulse_index.checked_mul(tau_rep) else {
            break;
        };
        if pulse >= duration {
            break;
        }
        cycles += 1;
        let excited = pulse as f64 + em.excitation_delay();
        match em.decay() {
            Decay::Radiative(dt) => {
                radiative += 1;
                let t = excited + dt;
                if !push_emission(&mut photons, t, duration) {
                    break;
                }
                ground = t;
            }
            Decay::Shelved(dt) => ground = excited + dt,
        }
        // pulses are discrete: never re-use the pulse that started this cycle
        if ground <= pulse as f64 {
            ground = pulse as f64 + 1.0;
        }
    }
    let triggers = (0..duration.div_ceil(tau_rep)).map(|i| i * tau_rep).collect();
    Ok(Emissions {
        photons: TimestampSeries::from_sorted(photons, duration),
        triggers,
        mode: ExcitationMode::pulsed(tau_rep),
        cycles,
        radiative_cycles: radiative,
    })
}

/// Drops every event closer than `deadtime` to the previously kept one.
pub fn apply_deadtime(times: &[u64], deadtime: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(times.len());
    let mut last: Option<u64> = None;
    for &t in times {
        match last {
            Some(l) if t - l < deadtime => {}
            _ => {
                out.push(t);
                last = Some(t);
            }
        }
    }
    out
}

/// Homogeneous Poisson event times at `rate_hz` over `[0, duration)`.
fn poisson_times(rng: &mut ChaCha8Rng, rate_hz: f64, duration: u64) -> Vec<u64> {
    if rate_hz <= 0.0 {
        return Vec::new();
    }
    let mean_gap = PS_PER_S / rate_hz;
    let end = duration as f64;
    let mut out = Vec::with_capacity((rate_hz * end / PS_PER_S * 1.05) as usize + 16);
    let mut t = exp(rng, mean_gap);
    while t < end {
        out.push(t as u64);
        t += exp(rng, mean_gap);
    }
    out
}

fn merge_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Merges per-channel sorted time lists into (time, channel)-sorted records.
fn assemble_records(streams: &[(u8, &[u64])]) -> Vec<DetectionRecord> {
    let total = streams.iter().map(|(_, s)| s.len()).sum();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; streams.len()];
    loop {
        let mut best: Option<(usize, (u64, u8))> = None;
        for (k, (ch, s)) in streams.iter().enumerate() {
            if let Some(&t) = s.get(idx[k]) {
                let key = (t, *ch);
                if best.is_none_or(|(_, b)| key < b) {
                    best = Some((k, key));
                }
            }
        }
        let Some((k, (time, channel))) = best else {
            break;
        };
        idx[k] += 1;
        out.push(DetectionRecord { channel, time });
    }
    out
}

/// Turns emissions into detector records on channels 1 and 2 (and the
/// trigger channel for pulsed emissions).
///
/// Order: keep each photon with probability `efficiency`, route it to
/// channel 1 with probability `split_ratio`, add per-channel Poisson
/// background, then apply each detector's deadtime.
pub fn detection_chain(
    emissions: &Emissions,
    chain: &DetectionChainParams,
    seed: u64,
) -> Result<Acquisition> {
    chain.validate()?;
    let duration = emissions.photons.duration();
    let mut thin = stage_rng(seed, Stage::Thinning);
    let mut split = stage_rng(seed, Stage::Splitting);
    let mut signal: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    for &t in emissions.photons.times() {
        // one draw per photon from each stream, kept or not
        let keep = thin.random::<f64>() < chain.efficiency;
        let to_first = split.random::<f64>() < chain.split_ratio;
        if keep {
            signal[if to_first { 0 } else { 1 }].push(t);
        }
    }
    let stages = [Stage::Background1, Stage::Background2];
    let mut detected: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    for k in 0..2 {
        let mut rng = stage_rng(seed, stages[k]);
        let bg = poisson_times(&mut rng, chain.background_hz[k], duration);
        let merged = if bg.is_empty() {
            std::mem::take(&mut signal[k])
        } else {
            merge_sorted(&signal[k], &bg)
        };
        detected[k] = if chain.deadtime[k] > 0 {
            apply_deadtime(&merged, chain.deadtime[k])
        } else {
            merged
        };
    }
    let mut streams: Vec<(u8, &[u64])> = vec![(1, &detected[0]), (2, &detected[1])];
    let mut channels = vec![1u8, 2];
    if let Some(trig) = emissions.mode.trigger_channel() {
        streams.insert(0, (trig, &emissions.triggers));
        channels.push(trig);
    }
    let records = assemble_records(&streams);
    Acquisition::new(duration, records, channels, emissions.mode, Some(seed))
}

/// Full run: emission for the configured excitation mode, then the chain.
pub fn simulate(config: &SimulationConfig) -> Result<Acquisition> {
    config.validate()?;
    let mut emissions = simulate_emissions(config)?;
    if !config.mode.is_pulsed() {
        emissions.mode = config.mode;
    }
    detection_chain(&emissions, &config.chain, config.seed)
}

pub fn simulate_emissions(config: &SimulationConfig) -> Result<Emissions> {
    match config.mode {
        ExcitationMode::Cw { .. } => simulate_emission_cw(&config.rates, config.duration, config.seed),
        ExcitationMode::Pulsed { tau_rep, .. } => {
            simulate_emission_pulsed(&config.rates, tau_rep, config.duration, config.seed)
        }
    }
}

/// Adds uniformly distributed background counts to the detector channels of
/// an existing acquisition. No deadtime is applied to the injected counts.
pub fn inject_background(acq: &Acquisition, rate_hz: &[(u8, f64)], seed: u64) -> Result<Acquisition> {
    let mut rng = stage_rng(seed, Stage::Injection);
    let mut records = acq.records().to_vec();
    for &(ch, rate) in rate_hz {
        if !acq.channels().contains(&ch) {
            return Err(Error::UnknownChannel(ch));
        }
        if Some(ch) == acq.trigger_channel() {
            return Err(Error::config("cannot inject background on the trigger channel"));
        }
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(Error::config(format!("background rate must be >= 0, got {rate}")));
        }
        records.extend(
            poisson_times(&mut rng, rate, acq.duration())
                .into_iter()
                .map(|time| DetectionRecord { channel: ch, time }),
        );
    }
    records.sort_by_key(DetectionRecord::sort_key);
    Ok(acq.with_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    const NS: f64 = 1e3;

    #[test]
    fn deadtime_filter_basic() {
        assert_eq!(apply_deadtime(&[0, 50, 80, 100, 161], 80), vec![0, 80, 161]);
        assert_eq!(apply_deadtime(&[0, 1, 2], 0), vec![0, 1, 2]);
    }

    #[test]
    fn cw_is_reproducible_and_increasing() {
        let r = EmitterRates::three_level(205.0 * NS, 1.6 * NS, 1.4 * NS, 420.0 * NS).unwrap();
        let a = simulate_emission_cw(&r, 1_000_000_000, 7).unwrap();
        let b = simulate_emission_cw(&r, 1_000_000_000, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.photons.times().windows(2).all(|w| w[0] < w[1]));
        let c = simulate_emission_cw(&r, 1_000_000_000, 8).unwrap();
        assert_ne!(a.photons, c.photons);
    }

    #[test]
    fn non_positive_lifetime_rejected() {
        let bad = EmitterRates {
            tau12: -1.0,
            tau21: 1.0,
            shelving: None,
        };
        assert!(simulate_emission_cw(&bad, 100, 0).is_err());
        assert!(simulate_emission_pulsed(&bad, 10, 100, 0).is_err());
    }

    #[test]
    fn pulsed_triggers_and_one_photon_per_period() {
        let r = EmitterRates::two_level(100.0, 2.7 * NS).unwrap();
        let e = simulate_emission_pulsed(&r, 100_000, 1_000_000_000, 3).unwrap();
        assert_eq!(e.triggers.len(), 10_000);
        assert_eq!(e.triggers[1], 100_000);
        let mut periods: Vec<u64> = e.photons.times().iter().map(|t| t / 100_000).collect();
        let n = periods.len();
        periods.dedup();
        assert_eq!(periods.len(), n);
    }

    #[test]
    fn chain_zero_efficiency_is_empty() {
        let r = EmitterRates::two_level(1.0 * NS, 1.0 * NS).unwrap();
        let e = simulate_emission_cw(&r, 10_000_000, 1).unwrap();
        let acq = detection_chain(&e, &DetectionChainParams::symmetric(0.0, 0, 0.0), 1).unwrap();
        assert!(acq.is_empty());
    }

    #[test]
    fn chain_conserves_photons_without_losses() {
        let r = EmitterRates::two_level(1.0 * NS, 1.0 * NS).unwrap();
        let e = simulate_emission_cw(&r, 10_000_000, 1).unwrap();
        let acq = detection_chain(&e, &DetectionChainParams::symmetric(1.0, 0, 0.0), 1).unwrap();
        assert_eq!(acq.count(1) + acq.count(2), e.photons.len());
        assert!(acq.count(1) > 0 && acq.count(2) > 0);
    }

    #[test]
    fn chain_rejects_bad_efficiency() {
        let e = Emissions {
            photons: TimestampSeries::from_sorted(vec![], 10),
            triggers: vec![],
            mode: ExcitationMode::cw(),
            cycles: 0,
            radiative_cycles: 0,
        };
        assert!(detection_chain(&e, &DetectionChainParams::symmetric(1.2, 0, 0.0), 0).is_err());
    }

    #[test]
    fn injected_background_lands_on_detectors() {
        let acq = Acquisition::new(1_000_000_000, vec![], [1, 2], ExcitationMode::cw(), None).unwrap();
        let noisy = inject_background(&acq, &[(1, 1e5), (2, 1e5)], 5).unwrap();
        assert!(noisy.count(1) > 50 && noisy.count(2) > 50);
        assert!(inject_background(&acq, &[(3, 1.0)], 5).is_err());
    }
}
