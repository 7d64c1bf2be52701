use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TimestampSeries;

/// Minimum number of events accepted by [`estimate_deadtime`].
pub const MIN_DEADTIME_EVENTS: usize = 10_000;

/// Width of the centred moving average applied before locating the plateau.
pub const SMOOTHING_BINS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadtimeParams {
    /// Gap histogram bin width, ps.
    pub bin_width: u64,
    /// Gaps at or beyond this are ignored, ps.
    pub max_gap: u64,
}

impl Default for DeadtimeParams {
    fn default() -> Self {
        Self {
            bin_width: 1_000,
            max_gap: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadtimeEstimate {
    /// Half-rise gap, ps.
    pub deadtime: f64,
    /// One-sigma uncertainty from Poisson counts in the bracketing bins, ps.
    pub uncertainty: f64,
    /// Smoothed maximum of the gap histogram, counts per bin.
    pub plateau: f64,
    pub bin_width: u64,
    /// Forward-gap counts, bin `i` covering `[i w, (i+1) w)`.
    pub counts: Vec<u64>,
}

/// Centred moving average; the window shrinks at the ends.
fn smooth(counts: &[u64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = counts.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            counts[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64
        })
        .collect()
}

/// Deadtime from the half-rise point of the nearest-neighbour gap histogram.
///
/// The histogram is smoothed with a 5-bin moving average, its maximum is the
/// plateau, and the deadtime is the gap at which the smoothed curve first
/// reaches half the plateau, linearly interpolated between bin centres.
pub fn estimate_deadtime(series: &TimestampSeries, params: &DeadtimeParams) -> Result<DeadtimeEstimate> {
    if params.bin_width == 0 || params.max_gap < params.bin_width {
        return Err(Error::config("deadtime histogram needs 0 < bin_width <= max_gap"));
    }
    if series.len() < MIN_DEADTIME_EVENTS {
        return Err(Error::InsufficientStatistics {
            needed: MIN_DEADTIME_EVENTS,
            got: series.len(),
        });
    }
    let w = params.bin_width;
    let nbins = (params.max_gap / w) as usize;
    let mut counts = vec![0u64; nbins];
    for pair in series.times().windows(2) {
        let i = ((pair[1] - pair[0]) / w) as usize;
        if i < nbins {
            counts[i] += 1;
        }
    }
    let smoothed = smooth(&counts, SMOOTHING_BINS);
    let plateau = smoothed.iter().copied().fold(0.0, f64::max);
    if plateau <= 0.0 {
        return Err(Error::InsufficientCounts("no gaps shorter than max_gap".into()));
    }
    let half = 0.5 * plateau;
    let j = smoothed
        .iter()
        .position(|&s| s >= half)
        .expect("maximum reaches half of itself");
    let wf = w as f64;
    let center = |i: usize| (i as f64 + 0.5) * wf;
    // Poisson variance of a moving-average value.
    let var = |i: usize| {
        let lo = i.saturating_sub(SMOOTHING_BINS / 2);
        let hi = (i + SMOOTHING_BINS / 2 + 1).min(nbins);
        let n = (hi - lo) as f64;
        smoothed[i] / n
    };
    let imax = smoothed
        .iter()
        .position(|&s| s == plateau)
        .expect("plateau is attained");
    let var_half = 0.25 * var(imax);
    let (deadtime, uncertainty) = if j == 0 {
        (center(0), 0.5 * wf)
    } else {
        let (s0, s1) = (smoothed[j - 1], smoothed[j]);
        let f = (half - s0) / (s1 - s0);
        let slope = s1 - s0;
        let spread = var(j - 1) * (1.0 - f).powi(2) + var(j) * f * f + var_half;
        (center(j - 1) + f * wf, wf * spread.sqrt() / slope)
    };
    Ok(DeadtimeEstimate {
        deadtime,
        uncertainty,
        plateau,
        bin_width: w,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_events() {
        let s = TimestampSeries::new((0..100).map(|i| i * 100_000).collect(), 100_000_000).unwrap();
        assert!(matches!(
            estimate_deadtime(&s, &DeadtimeParams::default()),
            Err(Error::InsufficientStatistics { .. })
        ));
    }

    #[test]
    fn hard_cut_recovered_within_a_bin() {
        // Gaps cycle over 80..=119 ns: a flat plateau beginning at 80 ns.
        let mut t = 0u64;
        let mut times = Vec::new();
        for i in 0..20_000u64 {
            times.push(t);
            t += 80_000 + (i % 40) * 1_000;
        }
        let s = TimestampSeries::new(times, t + 1).unwrap();
        let est = estimate_deadtime(&s, &DeadtimeParams::default()).unwrap();
        assert!((est.deadtime - 80_000.0).abs() <= 1_000.0, "{}", est.deadtime);
        assert!(est.uncertainty >= 0.0);
    }

    #[test]
    fn smoothing_preserves_flat() {
        assert_eq!(smooth(&[3, 3, 3, 3, 3, 3], 5), vec![3.0; 6]);
    }
}
