//! Three-level rate equations reduced to a 2x2 linear system in (rho2, rho3).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{EmitterRates, RateConstants};

/// Relative eigenvalue gap below which the double-root form is used.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Time dependence of `rho2(tau) / rho2_inf - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relaxation {
    /// Two-level: `c e^{lambda tau}`.
    Single { lambda: f64, c: f64 },
    /// `c_plus e^{lambda_plus tau} + c_minus e^{lambda_minus tau}`.
    Distinct {
        lambda_plus: f64,
        lambda_minus: f64,
        c_plus: f64,
        c_minus: f64,
    },
    /// Double root: `(c0 + c1 tau) e^{lambda tau}`.
    Degenerate { lambda: f64, c0: f64, c1: f64 },
    /// Complex pair `re ± i im`: `e^{re tau} (c_cos cos(im tau) + c_sin sin(im tau))`.
    Oscillating { re: f64, im: f64, c_cos: f64, c_sin: f64 },
}

/// Solution of the rate equations from `rho1(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModelSolution {
    pub relaxation: Relaxation,
    pub rho1_inf: f64,
    pub rho2_inf: f64,
    pub rho3_inf: f64,
    /// Half the trace of the reduced matrix, 1/ps.
    m: f64,
    /// Square root of `|disc|`, 1/ps.
    s: f64,
    /// Initial-slope coefficient of the normalized deviation.
    u: f64,
}

impl RateModelSolution {
    /// Eigenvalues were numerically degenerate and the limiting form is used.
    pub fn is_degenerate(&self) -> bool {
        matches!(self.relaxation, Relaxation::Degenerate { .. })
    }

    /// `g2(tau) = rho2(|tau|) / rho2_inf`; exactly 0 at `tau = 0`.
    pub fn g2(&self, tau: f64) -> f64 {
        let t = tau.abs();
        let (m, s, u) = (self.m, self.s, self.u);
        match self.relaxation {
            Relaxation::Single { lambda, .. } => 1.0 - (lambda * t).exp(),
            Relaxation::Degenerate { .. } => 1.0 - (m * t).exp() * (1.0 + u * t),
            Relaxation::Oscillating { .. } => {
                let x = s * t;
                1.0 - (m * t).exp() * (x.cos() + u * t * sinc(x))
            }
            Relaxation::Distinct { .. } => {
                let (ep, em) = (((m + s) * t).exp(), ((m - s) * t).exp());
                let cosh = 0.5 * (ep + em);
                let x = s * t;
                // e^{m t} sinh(s t) / s
                let sinh_over_s = if x < 1e-4 {
                    (m * t).exp() * t * (1.0 + x * x / 6.0)
                } else {
                    (ep - em) / (2.0 * s)
                };
                1.0 - (cosh + u * sinh_over_s)
            }
        }
    }
}

/// `sin(x)/x` with its series near zero.
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn check_constants(k: &RateConstants) -> Result<()> {
    let pos = |v: f64| v.is_finite() && v > 0.0;
    let nonneg = |v: f64| v.is_finite() && v >= 0.0;
    if !(pos(k.k12) && pos(k.k21) && nonneg(k.k23) && nonneg(k.k31)) {
        return Err(Error::config(format!("invalid rate constants {k:?}")));
    }
    if k.k23 > 0.0 && k.k31 == 0.0 {
        return Err(Error::config("k31 must be > 0 when k23 > 0"));
    }
    Ok(())
}

impl RateModelSolution {
    /// Solves from rate constants. `k23 = 0` with `k31 = 0` is a two-level
    /// emitter; `k23 = 0` with `k31 > 0` gives the same g2.
    pub fn from_constants(k: &RateConstants) -> Result<Self> {
        check_constants(k)?;
        if k.k31 == 0.0 {
            let lambda = -(k.k12 + k.k21);
            return Ok(Self {
                relaxation: Relaxation::Single { lambda, c: -1.0 },
                rho1_inf: k.k21 / (k.k12 + k.k21),
                rho2_inf: k.k12 / (k.k12 + k.k21),
                rho3_inf: 0.0,
                m: lambda,
                s: 0.0,
                u: 0.0,
            });
        }
        let a11 = -(k.k12 + k.k21 + k.k23);
        let a12 = -k.k12;
        let a21 = k.k23;
        let a22 = -k.k31;
        let m = 0.5 * (a11 + a22);
        let h = 0.5 * (a11 - a22);
        let disc = h * h + a12 * a21;
        let s = disc.abs().sqrt();
        let u = a11 - m + a12 * k.k23 / k.k31;
        let det = (k.k12 + k.k21 + k.k23) * k.k31 + k.k12 * k.k23;
        let rho2_inf = k.k12 * k.k31 / det;
        let rho3_inf = k.k12 * k.k23 / det;
        let relaxation = if s <= DEGENERACY_TOL * m.abs() {
            Relaxation::Degenerate {
                lambda: m,
                c0: -1.0,
                c1: -u,
            }
        } else if disc > 0.0 {
            Relaxation::Distinct {
                lambda_plus: m + s,
                lambda_minus: m - s,
                c_plus: -0.5 * (1.0 + u / s),
                c_minus: -0.5 * (1.0 - u / s),
            }
        } else {
            Relaxation::Oscillating {
                re: m,
                im: s,
                c_cos: -1.0,
                c_sin: -u / s,
            }
        };
        Ok(Self {
            relaxation,
            rho1_inf: 1.0 - rho2_inf - rho3_inf,
            rho2_inf,
            rho3_inf,
            m,
            s,
            u,
        })
    }
}

pub fn solve_rate_model(rates: &EmitterRates) -> Result<RateModelSolution> {
    rates.validate()?;
    RateModelSolution::from_constants(&rates.rate_constants())
}

/// Normalized g2 of a two- or three-level emitter, `tau` in ps.
pub fn rate_model_g2(tau: f64, rates: &EmitterRates) -> Result<f64> {
    Ok(solve_rate_model(rates)?.g2(tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_row() -> EmitterRates {
        EmitterRates::three_level(415_000.0, 2_700.0, 1_930.0, 204_000.0).unwrap()
    }

    #[test]
    fn zero_lag_is_exactly_zero() {
        assert_eq!(rate_model_g2(0.0, &table_row()).unwrap(), 0.0);
        assert_eq!(rate_model_g2(0.0, &EmitterRates::two_level(1e3, 2e3).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn long_lag_is_one() {
        assert!((rate_model_g2(1e9, &table_row()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_level_closed_form() {
        let r = EmitterRates::two_level(205_000.0, 1_600.0).unwrap();
        let k = r.rate_constants();
        let t = 1.0 / (k.k12 + k.k21);
        let g = rate_model_g2(t, &r).unwrap();
        assert!((g - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn vanishing_shelving_matches_two_level() {
        let k = RateConstants {
            k12: 1.0 / 415_000.0,
            k21: 1.0 / 2_700.0,
            k23: 0.0,
            k31: 1.0 / 204_000.0,
        };
        let sol = RateModelSolution::from_constants(&k).unwrap();
        for &t in &[0.0, 10.0, 1e3, 1e4, 1e5, 1e6] {
            let exact = 1.0 - (-(k.k12 + k.k21) * t).exp();
            assert!((sol.g2(t) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn populations_sum_to_one() {
        let s = solve_rate_model(&table_row()).unwrap();
        assert!((s.rho1_inf + s.rho2_inf + s.rho3_inf - 1.0).abs() < 1e-15);
        assert!(s.rho1_inf > 0.0 && s.rho2_inf > 0.0 && s.rho3_inf > 0.0);
    }

    #[test]
    fn coefficients_reproduce_g2() {
        let s = solve_rate_model(&table_row()).unwrap();
        let Relaxation::Distinct {
            lambda_plus,
            lambda_minus,
            c_plus,
            c_minus,
        } = s.relaxation
        else {
            panic!("expected distinct roots");
        };
        assert!(lambda_plus < 0.0 && lambda_minus < 0.0);
        assert!((1.0 + c_plus + c_minus).abs() < 1e-12);
        for &t in &[1e2, 1e3, 1e4, 1e5] {
            let g = 1.0 + c_plus * (lambda_plus * t).exp() + c_minus * (lambda_minus * t).exp();
            assert!((g - s.g2(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn complex_and_degenerate_branches_are_continuous() {
        // disc = ((a11 - a22)/2)^2 - k12 k23 crosses zero as k31 varies.
        let base = RateConstants {
            k12: 1.0,
            k21: 0.0 + 1e-300,
            k23: 1.0,
            k31: 4.0,
        };
        let deg = RateModelSolution::from_constants(&base).unwrap();
        assert!(deg.is_degenerate());
        let osc = RateModelSolution::from_constants(&RateConstants { k31: 3.9, ..base }).unwrap();
        assert!(matches!(osc.relaxation, Relaxation::Oscillating { .. }));
        let dis = RateModelSolution::from_constants(&RateConstants { k31: 4.1, ..base }).unwrap();
        assert!(matches!(dis.relaxation, Relaxation::Distinct { .. }));
        for &t in &[0.1, 0.5, 1.0, 3.0] {
            assert!((osc.g2(t) - deg.g2(t)).abs() < 0.05);
            assert!((dis.g2(t) - deg.g2(t)).abs() < 0.05);
        }
    }
}
