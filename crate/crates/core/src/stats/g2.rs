//! Start-multistop coincidence histograms between two detector channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TimestampSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Binning {
    /// Two-sided bins of width `bin_width` centred on multiples of it.
    Linear { bin_width: u64 },
    /// `n_bins` geometric bins over `|tau|` in `[min_lag, max_lag)`.
    Log { min_lag: u64, n_bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    /// Bin edges in ps, strictly increasing, `counts.len() + 1` entries.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_a: u64,
    pub n_b: u64,
    /// Acquisition duration, ps.
    pub duration: u64,
    /// Negative lags folded onto `|tau|`.
    pub folded: bool,
}

impl CorrelationHistogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| e[1] - e[0]).collect()
    }

    /// Expected coincidences per bin for two uncorrelated streams,
    /// `N_A * N_B * width / duration` (doubled when folded).
    pub fn expected_uncorrelated(&self) -> Vec<f64> {
        let scale = self.n_a as f64 * self.n_b as f64 / self.duration as f64;
        let fold = if self.folded { 2.0 } else { 1.0 };
        self.widths().iter().map(|w| fold * scale * w).collect()
    }

    /// Counts normalized so two uncorrelated streams give 1 in every bin.
    pub fn normalized(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(self.expected_uncorrelated())
            .map(|(&c, e)| c as f64 / e)
            .collect()
    }
}

/// Symmetric rounding of a lag to its linear bin index.
#[inline]
fn linear_index(lag: i64, w: u64) -> i64 {
    let mag = (2 * lag.unsigned_abs() + w) / (2 * w);
    if lag < 0 {
        -(mag as i64)
    } else {
        mag as i64
    }
}

/// Log-spaced edges from `min` to `max` inclusive.
pub fn log_edges(min: f64, max: f64, n_bins: usize) -> Vec<f64> {
    let (lo, hi) = (min.ln(), max.ln());
    let mut edges: Vec<f64> = (0..=n_bins)
        .map(|i| (lo + (hi - lo) * i as f64 / n_bins as f64).exp())
        .collect();
    edges[0] = min;
    edges[n_bins] = max;
    edges
}

/// Calls `f(lag)` for every pair with `|t_b - t_a| <= reach`.
fn for_each_pair(a: &[u64], b: &[u64], reach: u64, mut f: impl FnMut(i64)) {
    let mut lo = 0usize;
    for &ta in a {
        let start = ta.saturating_sub(reach);
        while lo < b.len() && b[lo] < start {
            lo += 1;
        }
        let stop = ta.saturating_add(reach);
        for &tb in &b[lo..] {
            if tb > stop {
                break;
            }
            f(tb as i64 - ta as i64);
        }
    }
}

/// Histogram of lags `tau = t_b - t_a` over all pairs within `max_lag`.
///
/// Linear binning is two-sided with `2n+1` bins, `n = max_lag / bin_width`,
/// the central bin covering `|tau| <= bin_width/2`. Log binning folds
/// negative lags onto `|tau|`.
pub fn g2_histogram_cw(
    a: &TimestampSeries,
    b: &TimestampSeries,
    max_lag: u64,
    binning: &Binning,
) -> Result<CorrelationHistogram> {
    if a.is_empty() {
        return Err(Error::EmptyChannel("channel A has no events".into()));
    }
    if b.is_empty() {
        return Err(Error::EmptyChannel("channel B has no events".into()));
    }
    if max_lag == 0 {
        return Err(Error::config("max_lag must be > 0"));
    }
    let duration = a.duration().max(b.duration());
    match *binning {
        Binning::Linear { bin_width: w } => {
            if w == 0 {
                return Err(Error::config("bin width must be > 0"));
            }
            let n = (max_lag / w) as i64;
            let nbins = (2 * n + 1) as usize;
            let mut counts = vec![0u64; nbins];
            let reach = (n as u64) * w + w / 2 + 1;
            for_each_pair(a.times(), b.times(), reach, |lag| {
                let k = linear_index(lag, w);
                if k.abs() <= n {
                    counts[(k + n) as usize] += 1;
                }
            });
            let wf = w as f64;
            let edges = (0..=nbins)
                .map(|i| (i as f64 - n as f64 - 0.5) * wf)
                .collect();
            Ok(CorrelationHistogram {
                edges,
                counts,
                n_a: a.len() as u64,
                n_b: b.len() as u64,
                duration,
                folded: false,
            })
        }
        Binning::Log { min_lag, n_bins } => {
            if min_lag == 0 || min_lag >= max_lag {
                return Err(Error::config("log binning needs 0 < min_lag < max_lag"));
            }
            if n_bins == 0 {
                return Err(Error::config("log binning needs at least one bin"));
            }
            let edges = log_edges(min_lag as f64, max_lag as f64, n_bins);
            let mut counts = vec![0u64; n_bins];
            for_each_pair(a.times(), b.times(), max_lag, |lag| {
                let x = lag.unsigned_abs() as f64;
                if x < edges[0] || x >= edges[n_bins] {
                    return;
                }
                let i = edges.partition_point(|&e| e <= x) - 1;
                counts[i] += 1;
            });
            Ok(CorrelationHistogram {
                edges,
                counts,
                n_a: a.len() as u64,
                n_b: b.len() as u64,
                duration,
                folded: true,
            })
        }
    }
}
