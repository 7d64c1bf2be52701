//! Closed-form photon-statistics models.
//!
//! Times are picoseconds (as `f64`) and rates are hertz unless a name says
//! otherwise.

mod cw_q;
mod pulsed_q;
mod rate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cw_q::{analytic_cw_q, analytic_cw_q_crossover, analytic_cw_q_limit, AnalyticCwQParams};
pub use pulsed_q::{
    eta_from_q0, pulsed_q0, pulsed_q_limit, pulsed_q_model, BetaRegime, PulsedQModelParams,
};
pub use rate::{rate_model_g2, solve_rate_model, Relaxation, RateModelSolution};

/// Count rate versus excitation power with linear background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationParams {
    /// Asymptotic emitter rate, Hz.
    pub i_inf: f64,
    /// Saturation power, µW.
    pub p_sat: f64,
    /// Linear background, Hz/µW.
    pub b: f64,
    /// Constant background, Hz.
    pub c: f64,
}

impl SaturationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.i_inf > 0.0 && self.p_sat > 0.0) {
            return Err(Error::config("saturation model needs i_inf > 0 and p_sat > 0"));
        }
        Ok(())
    }
}

/// `I(P) = i_inf P / (P + p_sat) + b P + c`.
pub fn saturation_rate(power: f64, p: &SaturationParams) -> Result<f64> {
    if !(power >= 0.0) {
        return Err(Error::config(format!("power must be >= 0, got {power}")));
    }
    Ok(p.i_inf * power / (power + p.p_sat) + p.b * power + p.c)
}

/// Two-exponential g2 with antibunching amplitude `a` and bunching amplitude `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoExpG2Params {
    pub a: f64,
    pub b: f64,
    /// Antibunching time, ps.
    pub tau1: f64,
    /// Bunching time, ps.
    pub tau2: f64,
}

impl TwoExpG2Params {
    /// Model value at zero delay, `b - a`.
    pub fn g2_zero(&self) -> f64 {
        self.b - self.a
    }
}

/// `1 - (1 + a) e^{-|tau|/tau1} + b e^{-|tau|/tau2}`.
pub fn g2_two_exp(tau: f64, p: &TwoExpG2Params) -> f64 {
    let t = tau.abs();
    1.0 - (1.0 + p.a) * (-t / p.tau1).exp() + p.b * (-t / p.tau2).exp()
}

/// Signal fraction `sigma = SBR / (1 + SBR)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRatio {
    pub sbr: f64,
}

impl BackgroundRatio {
    pub fn sigma(&self) -> f64 {
        self.sbr / (1.0 + self.sbr)
    }

    pub fn from_sigma(sigma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&sigma) {
            return Err(Error::config(format!("sigma must lie in [0, 1), got {sigma}")));
        }
        Ok(Self {
            sbr: sigma / (1.0 - sigma),
        })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma <= 1.0 {
        Ok(())
    } else if sigma == 0.0 {
        Err(Error::config("sigma = 0 is pure background; g2 cannot be corrected"))
    } else {
        Err(Error::config(format!("sigma must lie in (0, 1], got {sigma}")))
    }
}

/// Removes uncorrelated background: `(g2_raw + sigma^2 - 1) / sigma^2`.
pub fn background_correct(g2_raw: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if sigma == 1.0 {
        return Ok(g2_raw);
    }
    let s2 = sigma * sigma;
    Ok((g2_raw + s2 - 1.0) / s2)
}

/// Adds uncorrelated background: `sigma^2 g2 + 1 - sigma^2`.
pub fn background_uncorrect(g2_corrected: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if sigma == 1.0 {
        return Ok(g2_corrected);
    }
    let s2 = sigma * sigma;
    Ok(s2 * g2_corrected + 1.0 - s2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturation_spot_values() {
        let p = SaturationParams {
            i_inf: 1e5,
            p_sat: 240.0,
            b: 10.0,
            c: 300.0,
        };
        assert_eq!(saturation_rate(0.0, &p).unwrap(), 300.0);
        assert_eq!(saturation_rate(240.0, &p).unwrap(), 5e4 + 2400.0 + 300.0);
        assert!(saturation_rate(-1.0, &p).is_err());
    }

    #[test]
    fn two_exp_spot_value() {
        let p = TwoExpG2Params {
            a: 0.0,
            b: 0.3,
            tau1: 2_700.0,
            tau2: 200_000.0,
        };
        let expect = 1.0 - (-1.0f64).exp() + 0.3 * (-0.0135f64).exp();
        assert!((g2_two_exp(2_700.0, &p) - expect).abs() < 1e-15);
        assert!((g2_two_exp(2_700.0, &p) - 0.9281).abs() < 5e-5);
        assert!((g2_two_exp(0.0, &p) - p.g2_zero()).abs() < 1e-15);
        assert_eq!(g2_two_exp(-5.0, &p), g2_two_exp(5.0, &p));
    }

    #[test]
    fn background_correction() {
        assert_eq!(background_correct(0.42, 1.0).unwrap(), 0.42);
        assert!((background_correct(1.0, 0.3).unwrap() - 1.0).abs() < 1e-15);
        let raw = background_uncorrect(0.33, 0.987).unwrap();
        assert!((raw - 0.3473).abs() < 1e-4, "{raw}");
        assert!((background_correct(raw, 0.987).unwrap() - 0.33).abs() < 1e-14);
        assert!(background_correct(0.5, 0.0).is_err());
        assert!(background_correct(0.5, 1.5).is_err());
    }

    #[test]
    fn sigma_from_sbr() {
        let r = BackgroundRatio::from_sigma(0.75).unwrap();
        assert!((r.sbr - 3.0).abs() < 1e-12);
        assert!((r.sigma() - 0.75).abs() < 1e-15);
    }
}
