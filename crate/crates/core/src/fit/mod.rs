//! Nonlinear least squares and model fit drivers.

mod drivers;
mod lm;

pub use drivers::{
    fit_g2_two_exp, fit_lifetime, fit_pulsed_q, fit_rate_model, fit_saturation, g2_weights,
    PowerFit, RateModelData, RateModelFit,
};
pub use lm::{least_squares, FitParam, FitResult, LsOptions, Observations, ParamSpec, Transform};
