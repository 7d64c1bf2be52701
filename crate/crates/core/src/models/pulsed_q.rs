use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pulsed Q at one pulse period from detection efficiency and g2(0):
/// `eta (g2_0 / 2 - 1)`.
pub fn pulsed_q0(eta: f64, g2_0: f64) -> f64 {
    eta * (0.5 * g2_0 - 1.0)
}

/// Detection efficiency implied by a measured `Q(tau_rep)` and g2(0).
pub fn eta_from_q0(q: f64, g2_0: f64) -> Result<f64> {
    let d = 0.5 * g2_0 - 1.0;
    if d == 0.0 {
        return Err(Error::config("g2(0) = 2 carries no information on eta"));
    }
    Ok(q / d)
}

/// Effective shelving model for pulsed Q(k tau_rep). These lifetimes are
/// not the rate-equation lifetimes of [`crate::EmitterRates`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulsedQModelParams {
    pub eta: f64,
    /// Effective shelving time, ps.
    pub tau23: f64,
    /// Effective deshelving time, ps.
    pub tau31: f64,
    /// Pulse period, ps.
    pub tau_rep: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaRegime {
    /// `0 < beta < 2`: `(1 - beta)^k` decays.
    Convergent,
    /// `beta >= 2`: `(1 - beta)^k` alternates without decaying.
    Alternating,
}

impl PulsedQModelParams {
    pub fn beta(&self) -> f64 {
        self.tau_rep * (1.0 / self.tau23 + 1.0 / self.tau31)
    }

    pub fn validate(&self) -> Result<BetaRegime> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.tau23 > 0.0 && self.tau31 > 0.0 && self.tau_rep > 0.0) {
            return Err(Error::config("tau23, tau31 and tau_rep must be > 0"));
        }
        let beta = self.beta();
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config(format!("beta must be > 0, got {beta}")));
        }
        Ok(if beta >= 2.0 {
            BetaRegime::Alternating
        } else {
            BetaRegime::Convergent
        })
    }

    fn shelving_fraction(&self) -> f64 {
        self.tau31 / (self.tau23 + self.tau31)
    }
}

/// `x^k` by repeated squaring.
fn powu(mut x: f64, mut k: u64) -> f64 {
    let mut acc = 1.0;
    while k > 0 {
        if k & 1 == 1 {
            acc *= x;
        }
        x *= x;
        k >>= 1;
    }
    acc
}

/// `(k beta - 1 + (1 - beta)^k) / beta^2`, which is zero at `k = 1`.
///
/// For `k beta <= 1` it is summed as the binomial series
/// `sum_{m>=2} C(k, m) (-beta)^(m-2)`, free of the cancellation the closed
/// form suffers when `beta` is small.
fn excess(k: u64, beta: f64) -> f64 {
    let kf = k as f64;
    if kf * beta <= 1.0 {
        let mut term = kf * (kf - 1.0) / 2.0;
        let mut sum = 0.0;
        let mut m = 2u64;
        while m <= k && term != 0.0 {
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
            term *= -beta * (kf - m as f64) / (m as f64 + 1.0);
            m += 1;
        }
        sum
    } else {
        (kf * beta - 1.0 + powu(1.0 - beta, k)) / (beta * beta)
    }
}

/// Pulsed Q at `T = k tau_rep` for an emitter with a shelving state:
///
/// `eta [ f31 ((2 - beta)/beta - (2 (1 - beta)/k) (1 - (1 - beta)^k)/beta^2) - 1 ]`
///
/// with `f31 = tau31 / (tau23 + tau31)`. It is evaluated in the equivalent
/// form `eta [2 (1 - beta) f31 excess(k) / k - f23]`, exact at `k = 1`.
pub fn pulsed_q_model(k: u64, p: &PulsedQModelParams) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    p.validate()?;
    let beta = p.beta();
    let f31 = p.shelving_fraction();
    let f23 = p.tau23 / (p.tau23 + p.tau31);
    Ok(p.eta * (2.0 * (1.0 - beta) * f31 * excess(k, beta) / k as f64 - f23))
}

/// `k -> inf` limit of [`pulsed_q_model`], valid for `0 < beta < 2`.
pub fn pulsed_q_limit(p: &PulsedQModelParams) -> Result<f64> {
    p.validate()?;
    let beta = p.beta();
    Ok(p.eta * (p.shelving_fraction() * (2.0 - beta) / beta - 1.0))
}
