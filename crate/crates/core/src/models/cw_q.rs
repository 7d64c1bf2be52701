use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PS_PER_S;

/// Two-exponential CW g2 shape and detected rate feeding the analytic Q(T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCwQParams {
    /// Bunching amplitude.
    pub a: f64,
    /// Antibunching time, ps.
    pub t1: f64,
    /// Bunching time, ps.
    pub t2: f64,
    /// Mean detected rate, Hz.
    pub mean_rate: f64,
}

impl AnalyticCwQParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0 && self.t2 > 0.0 && self.mean_rate > 0.0) {
            return Err(Error::config("analytic Q needs t1, t2, mean_rate > 0"));
        }
        Ok(())
    }

    fn rate_per_ps(&self) -> f64 {
        self.mean_rate / PS_PER_S
    }
}

/// `phi(x) = e^{-x} - 1 + x`, accurate for small `x`.
fn phi(x: f64) -> f64 {
    if x < 1e-3 {
        // x^2/2 - x^3/6 + x^4/24 - x^5/120
        x * x * (0.5 - x * (1.0 / 6.0 - x * (1.0 / 24.0 - x / 120.0)))
    } else {
        (-x).exp_m1() + x
    }
}

/// Q(T) of a CW source whose g2 is two-exponential, `t` in ps.
///
/// Evaluated as `(2I/T) [a t2^2 phi(T/t2) - (1+a) t1^2 phi(T/t1)]`, which is
/// the double integral of `g2 - 1` rearranged to avoid cancellation.
pub fn analytic_cw_q(t: f64, p: &AnalyticCwQParams) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let i = p.rate_per_ps();
    2.0 * i / t * (p.a * p.t2 * p.t2 * phi(t / p.t2) - (1.0 + p.a) * p.t1 * p.t1 * phi(t / p.t1))
}

/// `lim_{T -> inf} Q(T) = -2 I (t1 (1 + a) - t2 a)`.
pub fn analytic_cw_q_limit(p: &AnalyticCwQParams) -> f64 {
    -2.0 * p.rate_per_ps() * (p.t1 * (1.0 + p.a) - p.t2 * p.a)
}

/// First sign change of Q(T) in `[lo, hi]` ps, located on a log grid and
/// refined by bisection. `None` when Q keeps one sign.
pub fn analytic_cw_q_crossover(p: &AnalyticCwQParams, lo: f64, hi: f64) -> Result<Option<f64>> {
    p.validate()?;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::config("crossover search needs 0 < lo < hi"));
    }
    const GRID: usize = 2_000;
    let ratio = (hi / lo).ln() / GRID as f64;
    let at = |i: usize| lo * (ratio * i as f64).exp();
    let mut prev = (lo, analytic_cw_q(lo, p));
    for i in 1..=GRID {
        let t = if i == GRID { hi } else { at(i) };
        let q = analytic_cw_q(t, p);
        if prev.1 == 0.0 {
            return Ok(Some(prev.0));
        }
        if prev.1.signum() != q.signum() {
            let (mut a, mut b, fa) = (prev.0, t, prev.1);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if analytic_cw_q(mid, p).signum() == fa.signum() {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return Ok(Some(0.5 * (a + b)));
        }
        prev = (t, q);
    }
    Ok(None)
}
