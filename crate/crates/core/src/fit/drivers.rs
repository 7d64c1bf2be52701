use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{least_squares, FitResult, LsOptions, Observations, ParamSpec};
use crate::error::{Error, Result};
use crate::models::{
    g2_two_exp, pulsed_q_model, saturation_rate, PulsedQModelParams,
    RateModelSolution, SaturationParams, TwoExpG2Params,
};
use crate::stats::{CorrelationHistogram, LifetimeHistogram, QSeries};
use crate::types::{EmitterRates, RateConstants, Shelving};

/// Minimum number of usable bins for a g2 fit.
pub const MIN_G2_BINS: usize = 8;

/// Keeps the lower-cost result, preferring converged fits.
fn better(a: Option<FitResult>, b: FitResult) -> Option<FitResult> {
    match a {
        None => Some(b),
        Some(a) => {
            let key = |f: &FitResult| (!f.converged, f.rss);
            if key(&b).partial_cmp(&key(&a)) == Some(std::cmp::Ordering::Less) {
                Some(b)
            } else {
                Some(a)
            }
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Slope of the least-squares line through `(x, y)`.
fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Single exponential plus flat background fitted from the histogram peak on.
///
/// Parameters: `amplitude` (counts/bin at the peak centre), `tau21` (ps) and
/// `background` (counts/bin). Poisson weights `1/max(counts, 1)`.
pub fn fit_lifetime(hist: &LifetimeHistogram) -> Result<FitResult> {
    let counts = &hist.counts;
    let (peak, &cmax) = counts
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .ok_or_else(|| Error::Fit("empty lifetime histogram".into()))?;
    if cmax == 0 || counts.len() - peak < 6 {
        return Err(Error::Fit("lifetime peak not identifiable".into()));
    }
    let centers = hist.centers();
    let t0 = centers[peak];
    let x: Vec<f64> = centers[peak..].iter().map(|t| t - t0).collect();
    let y: Vec<f64> = counts[peak..].iter().map(|&c| c as f64).collect();
    let tail = &y[y.len() - (y.len() / 4).max(1)..];
    let bg0 = median(tail.to_vec());
    let amp0 = (cmax as f64 - bg0).max(1.0);
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (t, c) in x.iter().zip(&y) {
        let v = c - bg0;
        if v <= 0.1 * amp0 {
            break;
        }
        lx.push(*t);
        ly.push(v.ln());
    }
    let span = x[x.len() - 1];
    let tau0 = if lx.len() >= 3 {
        let s = regression_slope(&lx, &ly);
        if s < 0.0 { -1.0 / s } else { span / 5.0 }
    } else {
        (hist.bin_width as f64).max(span / 20.0)
    };
    let w: Vec<f64> = y.iter().map(|&c| 1.0 / c.max(1.0)).collect();
    let obs = Observations::new(x, y).with_weights(w);
    let specs = [
        ParamSpec::log("amplitude", "counts/bin", amp0),
        ParamSpec::log("tau21", "ps", tau0),
        ParamSpec::linear("background", "counts/bin", bg0),
    ];
    least_squares(
        |p, x| x.iter().map(|t| p[0] * (-t / p[1]).exp() + p[2]).collect(),
        &obs,
        &specs,
        &LsOptions::default(),
    )
}

/// Poisson weights for normalized histogram values: `E^2 / max(counts, 1)`
/// with `E` the uncorrelated expectation per bin, which equals weighting the
/// raw counts by `1/max(counts, 1)`.
pub fn g2_weights(hist: &CorrelationHistogram) -> Vec<f64> {
    hist.counts
        .iter()
        .zip(hist.expected_uncorrelated())
        .map(|(&c, e)| e * e / (c as f64).max(1.0))
        .collect()
}

fn excluded_mask(x: &[f64], exclusions: &[(f64, f64)]) -> Vec<bool> {
    x.iter()
        .map(|t| exclusions.iter().any(|&(lo, hi)| t.abs() >= lo && t.abs() <= hi))
        .collect()
}

fn g2_observations(hist: &CorrelationHistogram, exclusions: &[(f64, f64)]) -> Result<Observations> {
    let x = hist.centers();
    let excluded = excluded_mask(&x, exclusions);
    let obs = Observations::new(x, hist.normalized())
        .with_weights(g2_weights(hist))
        .with_excluded(excluded);
    let n = obs.n_used();
    if n < MIN_G2_BINS {
        return Err(Error::Fit(format!(
            "{n} usable g2 bins, need at least {MIN_G2_BINS}"
        )));
    }
    Ok(obs)
}

/// Heuristic two-exponential starting points from normalized g2 data.
fn two_exp_starts(obs: &Observations) -> Vec<TwoExpG2Params> {
    let mut pts: Vec<(f64, f64)> = (0..obs.x.len())
        .filter(|&i| !obs.excluded.as_ref().is_some_and(|e| e[i]))
        .filter(|&i| obs.weight.as_ref().is_none_or(|w| w[i] > 0.0))
        .map(|i| (obs.x[i].abs(), obs.y[i]))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let min_lag = pts.iter().map(|p| p.0).find(|&t| t > 0.0).unwrap_or(1.0);
    let max_lag = pts.last().map_or(1.0, |p| p.0).max(min_lag);
    // Average of the innermost points stands in for g2(0).
    let g0 = pts.iter().take(2).map(|p| p.1).sum::<f64>() / pts.len().min(2) as f64;
    let half = 0.5 * (g0 + 1.0);
    let t_half = pts.iter().find(|p| p.1 >= half).map_or(min_lag, |p| p.0).max(min_lag);
    let tau1 = (t_half / std::f64::consts::LN_2).max(min_lag);
    let (peak_lag, peak) = pts
        .iter()
        .filter(|p| p.0 >= tau1)
        .fold((tau1, 1.0), |acc, p| if p.1 > acc.1 { (p.0, p.1) } else { acc });
    let b0 = (peak - 1.0).max(0.0);
    let tail = pts
        .iter()
        .find(|p| p.0 > peak_lag && p.1 - 1.0 < b0 / std::f64::consts::E)
        .map(|p| p.0);
    let mut tau2s = vec![];
    if let Some(t) = tail {
        tau2s.push(t.max(2.0 * tau1));
    }
    for f in [10.0, 100.0] {
        tau2s.push((f * tau1).min(max_lag));
    }
    tau2s
        .into_iter()
        .map(|tau2| {
            let tau2 = if tau2 <= tau1 { 2.0 * tau1 } else { tau2 };
            TwoExpG2Params {
                a: b0 - g0,
                b: b0,
                tau1,
                tau2,
            }
        })
        .collect()
}

/// Two-exponential g2 fit on the normalized histogram.
///
/// `exclusions` are `(lo, hi)` ranges of `|tau|` in ps whose bins get zero
/// weight. Parameters: `a`, `b`, `tau1` (ps), `tau2` (ps); the fitted g2(0)
/// is `b - a`, with standard error from
/// [`FitResult::std_err_of_difference`].
pub fn fit_g2_two_exp(hist: &CorrelationHistogram, exclusions: &[(f64, f64)]) -> Result<FitResult> {
    let obs = g2_observations(hist, exclusions)?;
    let mut best = None;
    for start in two_exp_starts(&obs) {
        let specs = [
            ParamSpec::linear("a", "", start.a),
            ParamSpec::linear("b", "", start.b),
            ParamSpec::log("tau1", "ps", start.tau1),
            ParamSpec::log("tau2", "ps", start.tau2),
        ];
        let fit = least_squares(
            |p, x| {
                let q = TwoExpG2Params {
                    a: p[0],
                    b: p[1],
                    tau1: p[2],
                    tau2: p[3],
                };
                x.iter().map(|&t| g2_two_exp(t, &q)).collect()
            },
            &obs,
            &specs,
            &LsOptions::default(),
        )?;
        best = better(best, fit);
    }
    Ok(best.expect("at least one start"))
}

/// One power of a rate-model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModelData {
    pub power_uw: f64,
    /// Raw (not background-corrected) g2 histogram.
    pub histogram: CorrelationHistogram,
    /// `(lo, hi)` ranges of `|tau|` in ps to ignore.
    pub exclusions: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub power_uw: f64,
    pub rates: EmitterRates,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModelFit {
    /// Parameters `alpha` then `tau23@<P>uW`, `tau31@<P>uW`, `sigma@<P>uW`
    /// per power.
    pub fit: FitResult,
    /// Excitation rate per power, `k12 = alpha P`, in 1/(ps µW).
    pub alpha: f64,
    pub per_power: Vec<PowerFit>,
}

/// Rate-model starting point for one power, from a two-exponential fit.
///
/// With fast rate `F = k12 + k21 + k23`, slow rate `S = k31 + k12 k23 / F`
/// and corrected bunching amplitude `B = k12 k23 / (k31 F)`, one gets
/// `k31 = S / (1 + B)` and `k12`, `k23` as the two roots of
/// `x^2 - (F - k21) x + B k31 F`. Which root is `k12` is left to the caller.
struct RateSeed {
    fast: f64,
    k31: f64,
    sigma: f64,
    k12_roots: Vec<f64>,
}

fn rate_seed(hist: &CorrelationHistogram, exclusions: &[(f64, f64)], k21: f64) -> RateSeed {
    let fallback = RateSeed {
        fast: 1.5 * k21,
        k31: 1e-3 * k21,
        sigma: 0.9,
        k12_roots: vec![0.01 * k21, 0.49 * k21],
    };
    let Some(f) = fit_g2_two_exp(hist, exclusions)
        .ok()
        .filter(|f| f.value("tau1") > 0.0 && f.value("tau2") > f.value("tau1"))
    else {
        return fallback;
    };
    let (a, b) = (f.value("a"), f.value("b"));
    let sigma2 = (1.0 - (b - a)).clamp(1e-2, 1.0);
    let bunch = (b / sigma2).max(1e-6);
    let fast = 1.0 / f.value("tau1");
    let k31 = 1.0 / f.value("tau2") / (1.0 + bunch);
    let sum = fast - k21;
    if !(sum > 0.0) {
        return RateSeed {
            fast: k21 * 1.01,
            k31,
            sigma: sigma2.sqrt(),
            k12_roots: vec![0.005 * k21],
        };
    }
    let prod = bunch * k31 * fast;
    let disc = (sum * sum - 4.0 * prod).max(0.0).sqrt();
    let roots = vec![0.5 * (sum - disc), 0.5 * (sum + disc)]
        .into_iter()
        .map(|r| r.clamp(1e-4 * sum, 0.9999 * sum))
        .collect();
    RateSeed {
        fast,
        k31,
        sigma: sigma2.sqrt(),
        k12_roots: roots,
    }
}

/// Three-level rate-equation fit across powers with `k12 = alpha P` shared,
/// `tau21` fixed, and per-power `tau23`, `tau31` and signal fraction `sigma`.
///
/// The model for each power is the rate-equation g2 with background added
/// back at `sigma`. Starting points come from per-power two-exponential fits;
/// each candidate `alpha` they suggest is tried and the best fit kept. With a
/// single power the `alpha` standard error is reported as unavailable.
pub fn fit_rate_model(data: &[RateModelData], tau21: f64) -> Result<RateModelFit> {
    if data.is_empty() {
        return Err(Error::Fit("no histograms given".into()));
    }
    if !(tau21 > 0.0) {
        return Err(Error::Fit("tau21 must be > 0".into()));
    }
    if data.iter().any(|d| !(d.power_uw > 0.0)) {
        return Err(Error::Fit("powers must be > 0".into()));
    }
    let k21 = 1.0 / tau21;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut excluded = Vec::new();
    let mut groups = Vec::with_capacity(data.len());
    let mut seeds = Vec::with_capacity(data.len());
    for d in data {
        let obs = g2_observations(&d.histogram, &d.exclusions)?;
        let begin = x.len();
        seeds.push(rate_seed(&d.histogram, &d.exclusions, k21));
        x.extend_from_slice(&obs.x);
        y.extend_from_slice(&obs.y);
        w.extend(obs.weight.unwrap());
        excluded.extend(obs.excluded.unwrap());
        groups.push((begin, x.len(), d.power_uw));
    }
    let obs = Observations::new(x, y).with_weights(w).with_excluded(excluded);

    // Every root of every power proposes a shared alpha.
    let mut alphas: Vec<f64> = data
        .iter()
        .zip(&seeds)
        .flat_map(|(d, s)| s.k12_roots.iter().map(move |k| k / d.power_uw))
        .filter(|a| a.is_finite() && *a > 0.0)
        .collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup_by(|a, b| (*a / *b - 1.0).abs() < 1e-3);
    if alphas.is_empty() {
        alphas.push(0.01 * k21 / data[0].power_uw);
    }

    let model = |p: &[f64], x: &[f64]| {
        let mut out = vec![f64::NAN; x.len()];
        let alpha = p[0];
        for (g, &(begin, end, power)) in groups.iter().enumerate() {
            let (tau23, tau31, sigma) = (p[1 + 3 * g], p[2 + 3 * g], p[3 + 3 * g]);
            let k = RateConstants {
                k12: alpha * power,
                k21,
                k23: 1.0 / tau23,
                k31: 1.0 / tau31,
            };
            let Ok(sol) = RateModelSolution::from_constants(&k) else {
                return out;
            };
            let s2 = sigma * sigma;
            for i in begin..end {
                out[i] = s2 * sol.g2(x[i]) + 1.0 - s2;
            }
        }
        out
    };

    let mut best: Option<FitResult> = None;
    for &alpha0 in &alphas {
        let mut specs = vec![ParamSpec::log("alpha", "1/(ps uW)", alpha0)];
        for (d, s) in data.iter().zip(&seeds) {
            let p = d.power_uw;
            let k23 = (s.fast - k21 - alpha0 * p).max(1e-6 * k21);
            specs.push(ParamSpec::log(&format!("tau23@{p}uW"), "ps", 1.0 / k23));
            specs.push(ParamSpec::log(&format!("tau31@{p}uW"), "ps", 1.0 / s.k31));
            specs.push(ParamSpec::linear(&format!("sigma@{p}uW"), "", s.sigma).bounded(Some(1e-3), Some(1.0)));
        }
        let fit = least_squares(model, &obs, &specs, &LsOptions::default())?;
        best = better(best, fit);
    }
    let mut fit = best.expect("at least one start");
    if data.len() == 1 {
        fit.params[0].std_err = None;
        fit.covariance = None;
    }
    let alpha = fit.params[0].value;
    let per_power = data
        .iter()
        .enumerate()
        .map(|(g, d)| PowerFit {
            power_uw: d.power_uw,
            rates: EmitterRates {
                tau12: 1.0 / (alpha * d.power_uw),
                tau21,
                shelving: Some(Shelving {
                    tau23: fit.params[1 + 3 * g].value,
                    tau31: fit.params[2 + 3 * g].value,
                }),
            },
            sigma: fit.params[3 + 3 * g].value,
        })
        .collect();
    Ok(RateModelFit {
        fit,
        alpha,
        per_power,
    })
}

/// `Q(k tau_rep) / eta`, or `None` when the model rejects the parameters.
fn pulsed_shape(k: &[f64], tau23: f64, tau31: f64, tau_rep: f64) -> Option<Vec<f64>> {
    let p = PulsedQModelParams {
        eta: 1.0,
        tau23,
        tau31,
        tau_rep,
    };
    k.iter().map(|&k| pulsed_q_model(k as u64, &p).ok()).collect()
}

/// Shelving-model fit of pulsed Q at integer multiples of `tau_rep`.
///
/// Parameters `eta`, `tau23` (ps), `tau31` (ps). The start is the best point
/// of a log grid over both lifetimes with `eta` solved linearly. The result
/// is flagged as not converged when a lifetime ends on its search bound,
/// which is how structureless data shows up.
pub fn fit_pulsed_q(series: &QSeries, tau_rep: u64) -> Result<FitResult> {
    if tau_rep == 0 {
        return Err(Error::Fit("tau_rep must be > 0".into()));
    }
    let (k, q): (Vec<f64>, Vec<f64>) = series
        .entries
        .iter()
        .filter(|e| e.t > 0 && e.t % tau_rep == 0)
        .map(|e| ((e.t / tau_rep) as f64, e.mean))
        .unzip();
    if k.len() < 3 {
        return Err(Error::Fit(format!(
            "{} Q values at multiples of tau_rep, need at least 3",
            k.len()
        )));
    }
    let rep = tau_rep as f64;
    let (lo, hi) = (1e-2 * rep, 1e5 * rep);
    const GRID: usize = 49;
    let grid = |i: usize| lo * (hi / lo).powf(i as f64 / (GRID - 1) as f64);
    let mut start: Option<(f64, f64, f64, f64)> = None;
    for i in 0..GRID {
        for j in 0..GRID {
            let (t23, t31) = (grid(i), grid(j));
            let Some(h) = pulsed_shape(&k, t23, t31, rep) else {
                continue;
            };
            let hh: f64 = h.iter().map(|v| v * v).sum();
            if hh == 0.0 {
                continue;
            }
            let eta = h.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / hh;
            if !(eta > 0.0 && eta <= 1.0) {
                continue;
            }
            let rss: f64 = h.iter().zip(&q).map(|(a, b)| (b - eta * a).powi(2)).sum();
            if start.is_none_or(|s| rss < s.3) {
                start = Some((eta, t23, t31, rss));
            }
        }
    }
    let (eta0, t23, t31, found) = match start {
        Some((e, a, b, _)) => (e, a, b, true),
        None => (1e-3, rep, 10.0 * rep, false),
    };
    let specs = [
        ParamSpec::log("eta", "", eta0).bounded(None, Some(1.0)),
        ParamSpec::log("tau23", "ps", t23).bounded(Some(lo), Some(hi)),
        ParamSpec::log("tau31", "ps", t31).bounded(Some(lo), Some(hi)),
    ];
    let obs = Observations::new(k, q);
    let mut fit = least_squares(
        |p, x| {
            pulsed_shape(x, p[1], p[2], rep)
                .map(|h| h.iter().map(|v| p[0] * v).collect())
                .unwrap_or_else(|| vec![f64::NAN; x.len()])
        },
        &obs,
        &specs,
        &LsOptions::default(),
    )?;
    let at_bound = |v: f64| (v / lo - 1.0).abs() < 1e-6 || (v / hi - 1.0).abs() < 1e-6;
    if !found || at_bound(fit.value("tau23")) || at_bound(fit.value("tau31")) {
        fit.converged = false;
    }
    Ok(fit)
}

/// Saturation-curve fit, parameters `i_inf` (Hz), `p_sat` (µW), `b` (Hz/µW)
/// and `c` (Hz), uniformly weighted.
///
/// For each trial `p_sat` the linear parameters are solved exactly and the
/// best trial seeds the nonlinear fit.
pub fn fit_saturation(power: &[f64], rate: &[f64]) -> Result<FitResult> {
    if power.len() != rate.len() {
        return Err(Error::Fit("power and rate arrays differ in length".into()));
    }
    if power.len() < 4 {
        return Err(Error::Fit(format!("{} points, need at least 4", power.len())));
    }
    if power.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::Fit("powers must be finite and >= 0".into()));
    }
    let r0 = rate[0];
    if rate.iter().all(|&r| r == r0) {
        return Err(Error::Fit("degenerate data: all rates are equal".into()));
    }
    let pmax = power.iter().copied().fold(0.0, f64::max);
    if !(pmax > 0.0) {
        return Err(Error::Fit("degenerate data: no positive power".into()));
    }
    let mut best: Option<([f64; 4], f64)> = None;
    for i in 0..=40 {
        let p_sat = pmax * 10f64.powf(-2.0 + 4.0 * i as f64 / 40.0);
        let a = DMatrix::from_fn(power.len(), 3, |r, c| match c {
            0 => power[r] / (power[r] + p_sat),
            1 => power[r],
            _ => 1.0,
        });
        let yv = DVector::from_column_slice(rate);
        let Ok(sol) = a.clone().svd(true, true).solve(&yv, 1e-14) else {
            continue;
        };
        if !(sol[0] > 0.0) {
            continue;
        }
        let rss = (a * &sol - yv).norm_squared();
        if best.is_none_or(|b| rss < b.1) {
            best = Some(([sol[0], p_sat, sol[1], sol[2]], rss));
        }
    }
    let start = match best {
        Some((s, _)) => s,
        None => {
            let rmax = rate.iter().copied().fold(f64::MIN, f64::max);
            [rmax.abs().max(1.0), 0.5 * pmax, 0.0, 0.0]
        }
    };
    let specs = [
        ParamSpec::log("i_inf", "Hz", start[0]),
        ParamSpec::log("p_sat", "uW", start[1]),
        ParamSpec::linear("b", "Hz/uW", start[2]),
        ParamSpec::linear("c", "Hz", start[3]),
    ];
    let obs = Observations::new(power.to_vec(), rate.to_vec());
    least_squares(
        |p, x| {
            let s = SaturationParams {
                i_inf: p[0],
                p_sat: p[1],
                b: p[2],
                c: p[3],
            };
            x.iter()
                .map(|&pw| saturation_rate(pw, &s).unwrap_or(f64::NAN))
                .collect()
        },
        &obs,
        &specs,
        &LsOptions::default(),
    )
}
