use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{for_each_occupied_window, merge_detectors, window_count, DEFAULT_K_MAX};
use crate::types::{Acquisition, TimestampSeries};

/// Q(T) of one series at one window length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MandelQ {
    pub q: f64,
    pub n_windows: u64,
    /// Mean photon number per window.
    pub mean: f64,
    /// Population variance of the photon number per window.
    pub variance: f64,
}

/// Window moments accumulated exactly in integers.
struct Moments {
    k: u64,
    s1: u128,
    s2: u128,
}

fn moments(series: &TimestampSeries, window: u64, k_max: u64, origin: u64) -> Result<Moments> {
    let k = window_count(series.duration(), window, k_max, origin)?;
    let (mut s1, mut s2) = (0u128, 0u128);
    for_each_occupied_window(series.times(), window, k, origin, |_, n| {
        s1 += n as u128;
        s2 += (n as u128) * (n as u128);
    });
    Ok(Moments { k, s1, s2 })
}

/// Mandel Q = variance / mean - 1 of the photon number in windows of length
/// `window`, using population variance over the windows.
pub fn mandel_q(series: &TimestampSeries, window: u64, k_max: u64, origin: u64) -> Result<MandelQ> {
    let Moments { k, s1, s2 } = moments(series, window, k_max, origin)?;
    if k < 2 {
        return Err(Error::InsufficientDuration { window_ps: window });
    }
    if s1 == 0 {
        return Err(Error::InsufficientCounts(format!(
            "no photons in any of the {k} windows of {window} ps"
        )));
    }
    let k = k as i128;
    let (s1, s2) = (s1 as i128, s2 as i128);
    // Q = (K*S2 - S1^2 - K*S1) / (K*S1), numerator exact
    let num = k * s2 - s1 * s1 - k * s1;
    let q = num as f64 / (k * s1) as f64;
    let kf = k as f64;
    Ok(MandelQ {
        q,
        n_windows: k as u64,
        mean: s1 as f64 / kf,
        variance: (k * s2 - s1 * s1) as f64 / (kf * kf),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QOptions {
    pub k_max: u64,
    /// Align windows to the first trigger and require T to be a multiple
    /// of the pulse period.
    pub pulsed_align: bool,
}

impl Default for QOptions {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            pulsed_align: false,
        }
    }
}

/// Q at one window length aggregated over acquisitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEntry {
    /// Window length, ps.
    pub t: u64,
    pub mean: f64,
    /// Sample standard deviation across acquisitions; `None` for one.
    pub std: Option<f64>,
    pub n_acquisitions: usize,
    /// Smallest window count used by any acquisition.
    pub n_windows: u64,
    /// Per-acquisition Q in input order.
    pub values: Vec<f64>,
}

impl QEntry {
    pub fn std_error(&self) -> Option<f64> {
        self.std.map(|s| s / (self.n_acquisitions as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSeries {
    pub entries: Vec<QEntry>,
}

impl QSeries {
    pub fn t_values(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.t).collect()
    }

    pub fn get(&self, t: u64) -> Option<&QEntry> {
        self.entries.iter().find(|e| e.t == t)
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

/// Window origin for an acquisition: the first trigger when aligning pulsed
/// data, otherwise the acquisition start.
pub fn window_origin(acq: &Acquisition, pulsed_align: bool) -> Result<u64> {
    if !pulsed_align {
        return Ok(0);
    }
    let trig = acq
        .trigger_channel()
        .ok_or_else(|| Error::config("pulsed alignment requested for a CW acquisition"))?;
    acq.records()
        .iter()
        .find(|r| r.channel == trig)
        .map(|r| r.time)
        .ok_or(Error::NoTriggers)
}

/// Q(T) for every window length on every acquisition, with mean and sample
/// standard deviation across acquisitions. Trigger records are excluded.
pub fn mandel_q_series(acqs: &[Acquisition], t_values: &[u64], opts: &QOptions) -> Result<QSeries> {
    if acqs.is_empty() {
        return Err(Error::config("no acquisitions given"));
    }
    let mut ts: Vec<u64> = t_values.to_vec();
    ts.sort_unstable();
    ts.dedup();
    if ts.is_empty() {
        return Err(Error::config("no window lengths given"));
    }
    if opts.pulsed_align {
        for acq in acqs {
            let tau_rep = acq
                .mode()
                .tau_rep()
                .ok_or_else(|| Error::config("pulsed alignment requested for a CW acquisition"))?;
            if let Some(&bad) = ts.iter().find(|&&t| t % tau_rep != 0) {
                return Err(Error::config(format!(
                    "window {bad} ps is not a multiple of the pulse period {tau_rep} ps"
                )));
            }
        }
    }
    let per_acq: Vec<Vec<MandelQ>> = acqs
        .par_iter()
        .map(|acq| {
            let series = merge_detectors(acq)?;
            let origin = window_origin(acq, opts.pulsed_align)?;
            ts.iter()
                .map(|&t| mandel_q(&series, t, opts.k_max, origin))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let entries = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let values: Vec<f64> = per_acq.iter().map(|row| row[i].q).collect();
            let (mean, std) = mean_std(&values);
            QEntry {
                t,
                mean,
                std,
                n_acquisitions: values.len(),
                n_windows: per_acq.iter().map(|row| row[i].n_windows).min().unwrap_or(0),
                values,
            }
        })
        .collect();
    Ok(QSeries { entries })
}

/// Empirical photon-number distribution for windows of length `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonNumberDistribution {
    pub t: u64,
    pub n_windows: u64,
    /// `probabilities[n]` = fraction of windows holding `n` photons.
    pub probabilities: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Standard deviation of a Poisson distribution with the same mean.
    pub poisson_std: f64,
}

pub fn photon_number_distribution(
    series: &TimestampSeries,
    window: u64,
    k_max: u64,
    origin: u64,
) -> Result<PhotonNumberDistribution> {
    let k = window_count(series.duration(), window, k_max, origin)?;
    let mut by_n: Vec<u64> = vec![0];
    let mut occupied = 0u64;
    let (mut s1, mut s2) = (0u128, 0u128);
    for_each_occupied_window(series.times(), window, k, origin, |_, n| {
        let idx = n as usize;
        if by_n.len() <= idx {
            by_n.resize(idx + 1, 0);
        }
        by_n[idx] += 1;
        occupied += 1;
        s1 += n as u128;
        s2 += (n as u128) * (n as u128);
    });
    by_n[0] = k - occupied;
    let kf = k as f64;
    let probabilities = by_n.iter().map(|&c| c as f64 / kf).collect();
    let mean = s1 as f64 / kf;
    let var = ((k as i128) * (s2 as i128) - (s1 as i128).pow(2)) as f64 / (kf * kf);
    Ok(PhotonNumberDistribution {
        t: window,
        n_windows: k,
        probabilities,
        mean,
        std: var.max(0.0).sqrt(),
        poisson_std: mean.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DetectionRecord, ExcitationMode};

    const NS: u64 = 1_000;

    fn hand_series() -> TimestampSeries {
        TimestampSeries::new(vec![5 * NS, 15 * NS, 25 * NS, 95 * NS], 100 * NS).unwrap()
    }

    #[test]
    fn hand_oracle_q() {
        let m = mandel_q(&hand_series(), 50 * NS, DEFAULT_K_MAX, 0).unwrap();
        assert_eq!(m.q, -0.5);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.variance, 1.0);
        assert_eq!(m.n_windows, 2);
    }

    #[test]
    fn one_per_window_gives_minus_one() {
        let s = TimestampSeries::new((0..100).map(|i| i * 10 + 3).collect(), 1000).unwrap();
        assert_eq!(mandel_q(&s, 10, DEFAULT_K_MAX, 0).unwrap().q, -1.0);
    }

    #[test]
    fn errors_for_empty_and_single_window() {
        let s = TimestampSeries::new(vec![], 100).unwrap();
        assert!(matches!(mandel_q(&s, 10, DEFAULT_K_MAX, 0), Err(Error::InsufficientCounts(_))));
        let s = TimestampSeries::new(vec![1, 2], 100).unwrap();
        assert!(mandel_q(&s, 100, DEFAULT_K_MAX, 0).is_err());
    }

    #[test]
    fn pnd_hand_example() {
        let d = photon_number_distribution(&hand_series(), 50 * NS, DEFAULT_K_MAX, 0).unwrap();
        assert_eq!(d.probabilities, vec![0.0, 0.5, 0.0, 0.5]);
        assert_eq!(d.mean, 2.0);
        assert_eq!(d.std, 1.0);
    }

    #[test]
    fn pnd_empty_and_deterministic() {
        let s = TimestampSeries::new(vec![], 100).unwrap();
        let d = photon_number_distribution(&s, 10, DEFAULT_K_MAX, 0).unwrap();
        assert_eq!(d.probabilities, vec![1.0]);
        let s = TimestampSeries::new((0..10).map(|i| i * 10).collect(), 100).unwrap();
        let d = photon_number_distribution(&s, 10, DEFAULT_K_MAX, 0).unwrap();
        assert_eq!(d.probabilities, vec![0.0, 1.0]);
        assert_eq!(d.std, 0.0);
        assert!(photon_number_distribution(&s, 1000, DEFAULT_K_MAX, 0).is_err());
    }

    fn cw_acq(times: &[u64], duration: u64) -> Acquisition {
        Acquisition::new(
            duration,
            times.iter().map(|&t| DetectionRecord::new(1, t)).collect(),
            [1, 2],
            ExcitationMode::cw(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn series_single_and_duplicated() {
        let a = cw_acq(&[5 * NS, 15 * NS, 25 * NS, 95 * NS], 100 * NS);
        let one = mandel_q_series(std::slice::from_ref(&a), &[50 * NS], &QOptions::default()).unwrap();
        assert_eq!(one.entries[0].n_acquisitions, 1);
        assert_eq!(one.entries[0].std, None);
        let two = mandel_q_series(&[a.clone(), a], &[50 * NS, 25 * NS], &QOptions::default()).unwrap();
        assert_eq!(two.t_values(), vec![25 * NS, 50 * NS]);
        assert_eq!(two.entries[1].std, Some(0.0));
        assert_eq!(two.entries[1].mean, -0.5);
    }

    #[test]
    fn pulsed_alignment_checks_multiples() {
        let acq = Acquisition::new(
            1000,
            vec![
                DetectionRecord::new(0, 100),
                DetectionRecord::new(1, 150),
                DetectionRecord::new(0, 200),
                DetectionRecord::new(2, 210),
                DetectionRecord::new(0, 300),
            ],
            [0, 1, 2],
            ExcitationMode::pulsed(100),
            None,
        )
        .unwrap();
        let opts = QOptions {
            pulsed_align: true,
            ..Default::default()
        };
        assert!(mandel_q_series(std::slice::from_ref(&acq), &[150], &opts).is_err());
        let s = mandel_q_series(&[acq], &[100], &opts).unwrap();
        // origin 100: 9 windows, two of which hold a photon
        assert_eq!(s.entries[0].n_windows, 9);
        assert!((s.entries[0].mean + 2.0 / 9.0).abs() < 1e-15);
    }
}
