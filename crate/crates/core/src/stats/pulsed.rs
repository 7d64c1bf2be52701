//! Trigger-referenced analyses for pulsed acquisitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::mandel::{mandel_q_series, mean_std, QOptions};
use crate::types::{Acquisition, DetectionRecord, TimestampSeries, PS_PER_S};

fn pulsed_parts(acq: &Acquisition) -> Result<(u8, u64)> {
    let trig = acq
        .trigger_channel()
        .ok_or_else(|| Error::config("acquisition is not pulsed (no trigger channel)"))?;
    let tau_rep = acq.mode().tau_rep().expect("pulsed mode has a period");
    Ok((trig, tau_rep))
}

/// Walks detector records with the time of the most recent trigger at or
/// before each of them. Records before the first trigger get `None`.
fn with_last_trigger(acq: &Acquisition, trig: u8, mut f: impl FnMut(&DetectionRecord, Option<u64>)) {
    let triggers = acq.triggers();
    let mut idx = 0usize;
    for r in acq.records().iter().filter(|r| r.channel != trig) {
        while idx < triggers.len() && triggers[idx] <= r.time {
            idx += 1;
        }
        let last = if idx == 0 { None } else { Some(triggers[idx - 1]) };
        f(r, last);
    }
}

/// Keeps detections whose delay after the most recent trigger lies in
/// `[start, start + width)`. Trigger records are kept.
pub fn trigger_filter(acq: &Acquisition, start: u64, width: u64) -> Result<Acquisition> {
    let (trig, tau_rep) = pulsed_parts(acq)?;
    if start.saturating_add(width) > tau_rep {
        return Err(Error::config(format!(
            "filter window [{start}, {}) ps does not fit in the pulse period {tau_rep} ps",
            start.saturating_add(width)
        )));
    }
    if acq.count(trig) == 0 {
        return Err(Error::NoTriggers);
    }
    let end = start + width;
    let mut keep_det = Vec::with_capacity(acq.len());
    with_last_trigger(acq, trig, |r, last| {
        if let Some(t0) = last {
            let delay = r.time - t0;
            keep_det.push(delay >= start && delay < end);
        } else {
            keep_det.push(false);
        }
    });
    let mut flags = keep_det.into_iter();
    let records = acq
        .records()
        .iter()
        .filter(|r| r.channel == trig || flags.next().unwrap_or(false))
        .copied()
        .collect();
    Ok(acq.with_records(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeHistogram {
    /// Bin width, ps.
    pub bin_width: u64,
    pub tau_rep: u64,
    /// Acquisition duration, ps.
    pub duration: u64,
    /// Counts of delay-after-trigger, bin `i` covering `[i w, (i+1) w)`.
    pub counts: Vec<u64>,
}

impl LifetimeHistogram {
    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width as f64;
        (0..self.counts.len()).map(|i| (i as f64 + 0.5) * w).collect()
    }

    /// Converts a flat level in counts per bin to a rate in Hz.
    pub fn per_bin_to_hz(&self, per_bin: f64) -> f64 {
        let periods = self.duration as f64 / self.tau_rep as f64;
        per_bin / (periods * self.bin_width as f64 / PS_PER_S)
    }
}

/// Histogram of detection delays after the most recent trigger, folded into
/// one pulse period.
pub fn lifetime_histogram(acq: &Acquisition, bin_width: u64) -> Result<LifetimeHistogram> {
    let (trig, tau_rep) = pulsed_parts(acq)?;
    if bin_width == 0 {
        return Err(Error::config("bin width must be > 0"));
    }
    if acq.count(trig) == 0 {
        return Err(Error::NoTriggers);
    }
    let nbins = tau_rep.div_ceil(bin_width) as usize;
    let mut counts = vec![0u64; nbins];
    with_last_trigger(acq, trig, |r, last| {
        if let Some(t0) = last {
            let delay = (r.time - t0) % tau_rep;
            counts[(delay / bin_width) as usize] += 1;
        }
    });
    Ok(LifetimeHistogram {
        bin_width,
        tau_rep,
        duration: acq.duration(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulsedG2Zero {
    pub g2_zero: f64,
    pub uncertainty: f64,
    pub zero_area: u64,
    /// Side-peak areas ordered by lag, `-n/2 .. -1, 1 .. n/2` periods.
    pub side_areas: Vec<u64>,
}

/// g2(0) from peak areas: coincidences within `half_width` of zero lag over
/// the mean of the `n_side_peaks` nearest side peaks at `k * tau_rep`.
/// The uncertainty is the sample standard deviation of the side-peak areas
/// relative to their mean.
pub fn g2_zero_pulsed(
    a: &TimestampSeries,
    b: &TimestampSeries,
    triggers: &[u64],
    tau_rep: u64,
    half_width: u64,
    n_side_peaks: usize,
) -> Result<PulsedG2Zero> {
    if triggers.is_empty() {
        return Err(Error::NoTriggers);
    }
    if tau_rep == 0 {
        return Err(Error::config("tau_rep must be > 0"));
    }
    if 2 * half_width >= tau_rep {
        return Err(Error::config("peak half-width must be below tau_rep / 2"));
    }
    if n_side_peaks < 2 || n_side_peaks % 2 != 0 {
        return Err(Error::config("number of side peaks must be even and >= 2"));
    }
    let side = (n_side_peaks / 2) as i64;
    let duration = a.duration().max(b.duration());
    let reach = side as u64 * tau_rep + half_width;
    if reach >= duration {
        return Err(Error::InsufficientCounts(format!(
            "only {} side peaks resolvable in a {duration} ps acquisition",
            2 * (duration.saturating_sub(half_width) / tau_rep)
        )));
    }
    let mut areas = vec![0u64; (2 * side + 1) as usize];
    let (ta, tb) = (a.times(), b.times());
    let mut lo = 0usize;
    let rep = tau_rep as i64;
    let hw = half_width as i64;
    for &x in ta {
        let start = x.saturating_sub(reach);
        while lo < tb.len() && tb[lo] < start {
            lo += 1;
        }
        for &y in &tb[lo..] {
            if y > x + reach {
                break;
            }
            let lag = y as i64 - x as i64;
            let k = (lag + lag.signum() * rep / 2) / rep;
            if k.abs() <= side && (lag - k * rep).abs() <= hw {
                areas[(k + side) as usize] += 1;
            }
        }
    }
    let zero_area = areas[side as usize];
    let side_areas: Vec<u64> = areas
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != side as usize)
        .map(|(_, &c)| c)
        .collect();
    let vals: Vec<f64> = side_areas.iter().map(|&c| c as f64).collect();
    let (mean, std) = mean_std(&vals);
    if mean == 0.0 {
        return Err(Error::InsufficientCounts("all side peaks are empty".into()));
    }
    Ok(PulsedG2Zero {
        g2_zero: zero_area as f64 / mean,
        uncertainty: std.unwrap_or(0.0) / mean,
        zero_area,
        side_areas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Filter width, ps; `None` for the unfiltered data.
    pub width: Option<u64>,
    pub mean: f64,
    pub std: Option<f64>,
    pub n_acquisitions: usize,
}

/// Q at `T = tau_rep` versus trigger-filter width, plus the unfiltered value.
pub fn filter_width_sweep(
    acqs: &[Acquisition],
    start: u64,
    widths: &[u64],
    k_max: u64,
) -> Result<Vec<SweepPoint>> {
    let first = acqs.first().ok_or_else(|| Error::config("no acquisitions given"))?;
    let tau_rep = first
        .mode()
        .tau_rep()
        .ok_or_else(|| Error::config("filter sweep needs pulsed acquisitions"))?;
    let opts = QOptions {
        k_max,
        pulsed_align: true,
    };
    let summarize = |width: Option<u64>, values: Vec<f64>| {
        let (mean, std) = mean_std(&values);
        SweepPoint {
            width,
            mean,
            std,
            n_acquisitions: values.len(),
        }
    };
    let mut out = Vec::with_capacity(widths.len() + 1);
    for &w in widths {
        let values = acqs
            .iter()
            .map(|a| q_or_zero(&trigger_filter(a, start, w)?, tau_rep, &opts))
            .collect::<Result<Vec<_>>>()?;
        out.push(summarize(Some(w), values));
    }
    let raw = acqs
        .iter()
        .map(|a| q_or_zero(a, tau_rep, &opts))
        .collect::<Result<Vec<_>>>()?;
    out.push(summarize(None, raw));
    Ok(out)
}

/// Q(tau_rep) of one acquisition, where no photons at all counts as Q = 0
/// (the limit as the filter width goes to zero).
fn q_or_zero(acq: &Acquisition, tau_rep: u64, opts: &QOptions) -> Result<f64> {
    match mandel_q_series(std::slice::from_ref(acq), &[tau_rep], opts) {
        Ok(s) => Ok(s.entries[0].mean),
        Err(Error::InsufficientCounts(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ExcitationMode;

    const NS: u64 = 1_000;

    fn pulsed(records: &[(u8, u64)]) -> Acquisition {
        Acquisition::new(
            1_000 * NS,
            records.iter().map(|&(c, t)| DetectionRecord::new(c, t)).collect(),
            [0, 1, 2],
            ExcitationMode::pulsed(100 * NS),
            None,
        )
        .unwrap()
    }

    #[test]
    fn filter_keeps_window() {
        let acq = pulsed(&[(0, 0), (1, 8 * NS), (2, 13 * NS), (0, 100 * NS), (1, 107 * NS)]);
        let f = trigger_filter(&acq, 7 * NS, 5 * NS).unwrap();
        let det: Vec<u64> = f.records().iter().filter(|r| r.channel != 0).map(|r| r.time).collect();
        assert_eq!(det, vec![8 * NS, 107 * NS]);
        assert_eq!(f.count(0), 2);
        // idempotent
        assert_eq!(trigger_filter(&f, 7 * NS, 5 * NS).unwrap(), f);
        // zero width keeps nothing
        let z = trigger_filter(&acq, 7 * NS, 0).unwrap();
        assert_eq!(z.len(), 2);
    }

    #[test]
    fn filter_errors() {
        let acq = pulsed(&[(1, 5)]);
        assert!(matches!(trigger_filter(&acq, 0, 10), Err(Error::NoTriggers)));
        let acq = pulsed(&[(0, 0)]);
        assert!(trigger_filter(&acq, 50 * NS, 60 * NS).is_err());
        let cw = Acquisition::new(10, vec![], [1], ExcitationMode::cw(), None).unwrap();
        assert!(trigger_filter(&cw, 0, 1).is_err());
    }

    #[test]
    fn lifetime_single_detection() {
        let acq = pulsed(&[(0, 0), (1, 3 * NS + 200)]);
        let h = lifetime_histogram(&acq, NS).unwrap();
        assert_eq!(h.counts.len(), 100);
        assert_eq!(h.counts[3], 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 1);
        assert!(lifetime_histogram(&pulsed(&[(1, 4)]), NS).is_err());
    }

    fn periodic(offsets: [u64; 2], periods: u64) -> (TimestampSeries, TimestampSeries) {
        let rep = 100 * NS;
        let dur = periods * rep;
        let a = (0..periods).map(|k| k * rep + offsets[0]).collect();
        let b = (0..periods).map(|k| k * rep + offsets[1]).collect();
        (
            TimestampSeries::new(a, dur).unwrap(),
            TimestampSeries::new(b, dur).unwrap(),
        )
    }

    #[test]
    fn g2_zero_equal_areas_is_one() {
        let (a, b) = periodic([5 * NS, 6 * NS], 200);
        let trig: Vec<u64> = (0..200).map(|k| k * 100 * NS).collect();
        let r = g2_zero_pulsed(&a, &b, &trig, 100 * NS, 10 * NS, 18).unwrap();
        // edge periods lose a few side coincidences; zero peak has all 200
        assert!((r.g2_zero - 1.0).abs() < 0.05, "{}", r.g2_zero);
        assert_eq!(r.side_areas.len(), 18);
    }

    #[test]
    fn g2_zero_without_zero_coincidences() {
        // A fires on even periods, B on odd: no zero-lag pairs
        let rep = 100 * NS;
        let a: Vec<u64> = (0..200).filter(|k| k % 2 == 0).map(|k| k * rep + 5 * NS).collect();
        let b: Vec<u64> = (0..200).filter(|k| k % 2 == 1).map(|k| k * rep + 5 * NS).collect();
        let a = TimestampSeries::new(a, 200 * rep).unwrap();
        let b = TimestampSeries::new(b, 200 * rep).unwrap();
        let trig: Vec<u64> = (0..200).map(|k| k * rep).collect();
        let r = g2_zero_pulsed(&a, &b, &trig, rep, 10 * NS, 18).unwrap();
        assert_eq!(r.zero_area, 0);
        assert_eq!(r.g2_zero, 0.0);
    }

    #[test]
    fn g2_zero_errors() {
        let (a, b) = periodic([5 * NS, 6 * NS], 5);
        let trig = vec![0];
        assert!(g2_zero_pulsed(&a, &b, &trig, 100 * NS, 10 * NS, 18).is_err());
        assert!(g2_zero_pulsed(&a, &b, &[], 100 * NS, 10 * NS, 2).is_err());
        assert!(g2_zero_pulsed(&a, &b, &trig, 100 * NS, 50 * NS, 2).is_err());
    }
}
