//! Channel merging and fixed-length window partitioning.

use crate::error::{Error, Result};
use crate::types::{Acquisition, TimestampSeries};

/// Default cap on the number of windows per acquisition.
pub const DEFAULT_K_MAX: u64 = 100_000_000;

/// Merges the listed channels into one sorted series.
///
/// The trigger channel is only included when it appears in `channels`.
pub fn merge_channels(acq: &Acquisition, channels: &[u8]) -> Result<TimestampSeries> {
    if channels.is_empty() {
        return Err(Error::config("channel subset must not be empty"));
    }
    for &c in channels {
        if !acq.channels().contains(&c) {
            return Err(Error::UnknownChannel(c));
        }
    }
    // records are already sorted by (time, channel)
    let mut wanted = [false; 256];
    for &c in channels {
        wanted[c as usize] = true;
    }
    let times = acq
        .records()
        .iter()
        .filter(|r| wanted[r.channel as usize])
        .map(|r| r.time)
        .collect();
    Ok(TimestampSeries::from_sorted(times, acq.duration()))
}

/// Merges every detector channel (everything except the trigger).
pub fn merge_detectors(acq: &Acquisition) -> Result<TimestampSeries> {
    let channels = acq.detector_channels();
    if channels.is_empty() {
        return Ok(TimestampSeries::from_sorted(Vec::new(), acq.duration()));
    }
    merge_channels(acq, &channels)
}

/// Number of complete windows `[origin + iT, origin + (i+1)T)` that fit in
/// the series, capped at `k_max`.
pub fn window_count(duration: u64, window: u64, k_max: u64, origin: u64) -> Result<u64> {
    if window == 0 {
        return Err(Error::config("window length must be > 0"));
    }
    if k_max == 0 {
        return Err(Error::config("k_max must be > 0"));
    }
    let available = duration.saturating_sub(origin) / window;
    let k = available.min(k_max);
    if k == 0 {
        return Err(Error::InsufficientDuration { window_ps: window });
    }
    Ok(k)
}

/// Calls `f` with the count of every non-empty window, in window order.
/// Events outside the `k` complete windows are ignored.
pub(crate) fn for_each_occupied_window(
    times: &[u64],
    window: u64,
    k: u64,
    origin: u64,
    mut f: impl FnMut(u64, u64),
) {
    let end = origin + k * window;
    let start = times.partition_point(|&t| t < origin);
    let mut current: Option<u64> = None;
    let mut count = 0u64;
    for &t in &times[start..] {
        if t >= end {
            break;
        }
        let idx = (t - origin) / window;
        if current == Some(idx) {
            count += 1;
        } else {
            if let Some(prev) = current {
                f(prev, count);
            }
            current = Some(idx);
            count = 1;
        }
    }
    if let Some(prev) = current {
        f(prev, count);
    }
}

/// Splits the series into contiguous windows of length `window` starting at
/// `origin` and returns the event count of each.
///
/// The trailing partial window is discarded and at most `k_max` windows are
/// produced (the first ones).
pub fn partition_windows(
    series: &TimestampSeries,
    window: u64,
    k_max: u64,
    origin: u64,
) -> Result<Vec<u64>> {
    let k = window_count(series.duration(), window, k_max, origin)?;
    let mut counts = vec![0u64; k as usize];
    for_each_occupied_window(series.times(), window, k, origin, |i, n| {
        counts[i as usize] = n;
    });
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DetectionRecord, ExcitationMode};

    const NS: u64 = 1_000;

    fn acq(records: &[(u8, u64)], duration: u64) -> Acquisition {
        Acquisition::new(
            duration,
            records.iter().map(|&(c, t)| DetectionRecord::new(c, t)).collect(),
            [1, 2],
            ExcitationMode::cw(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn merge_two_element_sort() {
        let a = acq(&[(1, 5 * NS), (2, 3 * NS)], 100 * NS);
        let s = merge_channels(&a, &[1, 2]).unwrap();
        assert_eq!(s.times(), &[3 * NS, 5 * NS]);
    }

    #[test]
    fn merge_empty_and_ties() {
        let a = acq(&[], 100);
        assert!(merge_channels(&a, &[1, 2]).unwrap().is_empty());

        let a = acq(&[(2, 7 * NS), (1, 7 * NS)], 100 * NS);
        assert_eq!(a.records()[0].channel, 1);
        let s = merge_channels(&a, &[1, 2]).unwrap();
        assert_eq!(s.times(), &[7 * NS, 7 * NS]);
    }

    #[test]
    fn merge_unknown_channel_named() {
        let a = acq(&[(1, 1)], 10);
        let err = merge_channels(&a, &[1, 9]).unwrap_err();
        assert!(err.to_string().contains('9'));
        assert!(merge_channels(&a, &[]).is_err());
    }

    #[test]
    fn partition_hand_example() {
        let s = TimestampSeries::new(vec![5 * NS, 15 * NS, 25 * NS, 95 * NS], 100 * NS).unwrap();
        assert_eq!(partition_windows(&s, 50 * NS, DEFAULT_K_MAX, 0).unwrap(), vec![3, 1]);
        assert_eq!(partition_windows(&s, 100 * NS, DEFAULT_K_MAX, 0).unwrap(), vec![4]);
    }

    #[test]
    fn partition_discards_partial_and_honors_cap() {
        let s = TimestampSeries::new(vec![0, 10, 20, 29, 35], 36).unwrap();
        assert_eq!(partition_windows(&s, 10, DEFAULT_K_MAX, 0).unwrap(), vec![1, 1, 2]);
        assert_eq!(partition_windows(&s, 10, 2, 0).unwrap(), vec![1, 1]);
        assert_eq!(partition_windows(&s, 10, 10, 5).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn partition_errors() {
        let s = TimestampSeries::new(vec![1], 10).unwrap();
        assert!(partition_windows(&s, 0, 10, 0).is_err());
        assert!(matches!(
            partition_windows(&s, 11, 10, 0),
            Err(Error::InsufficientDuration { .. })
        ));
        assert!(partition_windows(&s, 5, 10, 8).is_err());
    }

    #[test]
    fn cap_of_ten_to_the_eight() {
        // 100 s at 100 ns admits 10^9 windows; only the first 10^8 are used.
        let k = window_count(100 * 1_000_000_000_000, 100 * NS, DEFAULT_K_MAX, 0).unwrap();
        assert_eq!(k, DEFAULT_K_MAX);
    }
}
