//! Damped Gauss-Newton (Levenberg-Marquardt) least squares.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Linear,
    /// Optimized as `ln(value)`; the value stays positive.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub unit: String,
    pub initial: f64,
    pub transform: Transform,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub fixed: bool,
}

impl ParamSpec {
    pub fn linear(name: &str, unit: &str, initial: f64) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            initial,
            transform: Transform::Linear,
            lower: None,
            upper: None,
            fixed: false,
        }
    }

    pub fn log(name: &str, unit: &str, initial: f64) -> Self {
        Self {
            transform: Transform::Log,
            ..Self::linear(name, unit, initial)
        }
    }

    pub fn bounded(mut self, lower: Option<f64>, upper: Option<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn fixed(mut self) -> Self {
        self.fixed = true;
        self
    }

    fn clamp(&self, v: f64) -> f64 {
        let v = self.lower.map_or(v, |lo| v.max(lo));
        self.upper.map_or(v, |hi| v.min(hi))
    }

    fn to_internal(&self, v: f64) -> f64 {
        match self.transform {
            Transform::Linear => v,
            Transform::Log => v.ln(),
        }
    }

    fn to_natural(&self, z: f64) -> f64 {
        self.clamp(match self.transform {
            Transform::Linear => z,
            Transform::Log => z.exp(),
        })
    }

    fn validate(&self) -> Result<()> {
        let v = self.initial;
        if !v.is_finite() {
            return Err(Error::Fit(format!("{}: initial value {v} is not finite", self.name)));
        }
        if self.transform == Transform::Log && v <= 0.0 {
            return Err(Error::Fit(format!("{}: log parameter needs initial > 0, got {v}", self.name)));
        }
        if self.lower.is_some_and(|lo| v < lo) || self.upper.is_some_and(|hi| v > hi) {
            return Err(Error::Fit(format!("{}: initial value {v} outside bounds", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub unit: String,
    pub value: f64,
    /// `None` for fixed parameters or when the curvature is singular.
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<FitParam>,
    /// Weighted residual sum of squares at the solution.
    pub rss: f64,
    pub initial_rss: f64,
    /// `rss / (n_points - n_free)`, `None` with no degrees of freedom.
    pub reduced_chi2: Option<f64>,
    pub n_points: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Covariance in natural units, rows in `params` order; fixed rows are
    /// zero. `None` when any free parameter lacks a standard error.
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<&FitParam> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Value of a parameter; panics on an unknown name.
    pub fn value(&self, name: &str) -> f64 {
        self.param(name).unwrap_or_else(|| panic!("no parameter {name}")).value
    }

    pub fn std_err(&self, name: &str) -> Option<f64> {
        self.param(name).and_then(|p| p.std_err)
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Standard error of `value(a) - value(b)`.
    pub fn std_err_of_difference(&self, a: &str, b: &str) -> Option<f64> {
        let cov = self.covariance.as_ref()?;
        let (i, j) = (self.index(a)?, self.index(b)?);
        let v = cov[i][i] + cov[j][j] - 2.0 * cov[i][j];
        Some(v.max(0.0).sqrt())
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }
}

/// Points to fit. `weight` defaults to 1; `excluded[i] = true` drops point `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observations {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub weight: Option<Vec<f64>>,
    pub excluded: Option<Vec<bool>>,
}

impl Observations {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            x,
            y,
            ..Self::default()
        }
    }

    pub fn with_weights(mut self, w: Vec<f64>) -> Self {
        self.weight = Some(w);
        self
    }

    pub fn with_excluded(mut self, excluded: Vec<bool>) -> Self {
        self.excluded = Some(excluded);
        self
    }

    /// Number of points that take part in the fit.
    pub fn n_used(&self) -> usize {
        (0..self.y.len()).filter(|&i| self.used(i)).count()
    }

    fn used(&self, i: usize) -> bool {
        !self.excluded.as_ref().is_some_and(|e| e[i]) && self.weight.as_ref().is_none_or(|w| w[i] > 0.0)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.len() != n
            || self.weight.as_ref().is_some_and(|w| w.len() != n)
            || self.excluded.as_ref().is_some_and(|e| e.len() != n)
        {
            return Err(Error::Fit("observation arrays differ in length".into()));
        }
        if self.weight.as_ref().is_some_and(|w| w.iter().any(|&v| !(v >= 0.0 && v.is_finite()))) {
            return Err(Error::Fit("weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsOptions {
    pub max_iter: usize,
    pub initial_damping: f64,
    /// Relative cost change below which the fit has converged.
    pub cost_tol: f64,
    /// Relative step size below which the fit has converged.
    pub step_tol: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for LsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            initial_damping: 1e-3,
            cost_tol: 1e-10,
            step_tol: 1e-8,
            fd_step: 1e-6,
        }
    }
}

struct Problem<'a, F> {
    model: F,
    obs: &'a Observations,
    specs: &'a [ParamSpec],
    free: Vec<usize>,
    used: Vec<usize>,
    sqrt_w: Vec<f64>,
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> Problem<'_, F> {
    fn natural(&self, z: &DVector<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = self.specs.iter().map(|s| s.clamp(s.initial)).collect();
        for (j, &i) in self.free.iter().enumerate() {
            v[i] = self.specs[i].to_natural(z[j]);
        }
        v
    }

    /// Weighted residuals `sqrt(w) (y - f)` over used points; `None` if the
    /// model is not finite there.
    fn residuals(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        let f = (self.model)(&self.natural(z), &self.obs.x);
        if f.len() != self.obs.y.len() {
            return None;
        }
        let r: Vec<f64> = self
            .used
            .iter()
            .zip(&self.sqrt_w)
            .map(|(&i, &sw)| sw * (self.obs.y[i] - f[i]))
            .collect();
        r.iter().all(|v| v.is_finite()).then(|| DVector::from_vec(r))
    }

    /// Jacobian of the weighted model values (negated residuals).
    fn jacobian(&self, z: &DVector<f64>, step: f64) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(self.used.len(), z.len());
        for j in 0..z.len() {
            let h = step * z[j].abs().max(1.0);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let (rp, rm) = (self.residuals(&zp)?, self.residuals(&zm)?);
            jac.set_column(j, &((rm - rp) / (2.0 * h)));
        }
        Some(jac)
    }
}

/// Minimizes `sum w_i (y_i - model(p, x)_i)^2` over the free parameters.
///
/// `model` receives the full natural-unit parameter vector (fixed entries at
/// their initial values) and all `x`, and returns one prediction per point.
/// Never returns a point worse than the initial guess.
pub fn least_squares<F>(
    model: F,
    obs: &Observations,
    specs: &[ParamSpec],
    opts: &LsOptions,
) -> Result<FitResult>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    obs.validate()?;
    for s in specs {
        s.validate()?;
    }
    let free: Vec<usize> = (0..specs.len()).filter(|&i| !specs[i].fixed).collect();
    let used: Vec<usize> = (0..obs.y.len()).filter(|&i| obs.used(i)).collect();
    if used.len() < free.len() || used.is_empty() {
        return Err(Error::Fit(format!(
            "{} usable points for {} free parameters",
            used.len(),
            free.len()
        )));
    }
    let sqrt_w = used
        .iter()
        .map(|&i| obs.weight.as_ref().map_or(1.0, |w| w[i].sqrt()))
        .collect();
    let prob = Problem {
        model,
        obs,
        specs,
        free,
        used,
        sqrt_w,
    };
    let mut z = DVector::from_iterator(
        prob.free.len(),
        prob.free.iter().map(|&i| specs[i].to_internal(specs[i].initial)),
    );
    let mut r = prob
        .residuals(&z)
        .ok_or_else(|| Error::Fit("model is not finite at the initial guess".into()))?;
    let initial_rss = r.norm_squared();
    let mut cost = initial_rss;
    let mut damping = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    let n = z.len();

    'outer: while iterations < opts.max_iter && n > 0 {
        if cost == 0.0 {
            converged = true;
            break;
        }
        let Some(jac) = prob.jacobian(&z, opts.fd_step) else {
            break;
        };
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        let dmax = jtj.diagonal().max();
        loop {
            iterations += 1;
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12 * dmax).max(f64::MIN_POSITIVE);
            }
            let step = a.cholesky().map(|c| c.solve(&grad));
            if let Some(delta) = step {
                let z_new = &z + &delta;
                let trial = prob.residuals(&z_new);
                if let Some(r_new) = trial.filter(|_| delta.iter().all(|v| v.is_finite())) {
                    let cost_new = r_new.norm_squared();
                    if cost_new < cost {
                        let rel_cost = (cost - cost_new) / cost;
                        let rel_step = delta.norm() / (z.norm() + opts.step_tol);
                        z = z_new;
                        r = r_new;
                        cost = cost_new;
                        damping = (damping / 10.0).max(1e-15);
                        if rel_cost < opts.cost_tol || rel_step < opts.step_tol {
                            converged = true;
                            break 'outer;
                        }
                        continue 'outer;
                    }
                }
            }
            damping *= 10.0;
            if damping > 1e20 {
                // No descent direction survives: stationary within precision.
                converged = true;
                break 'outer;
            }
            if iterations >= opts.max_iter {
                break 'outer;
            }
        }
    }
    if n == 0 {
        converged = true;
    }

    let n_points = prob.used.len();
    let dof = n_points - n;
    let reduced_chi2 = (dof > 0).then(|| cost / dof as f64);
    let curvature = if n > 0 {
        reduced_chi2.and_then(|s2| {
            let jac = prob.jacobian(&z, opts.fd_step)?;
            Some(partial_inverse(&(jac.transpose() * &jac)).scaled(s2))
        })
    } else {
        None
    };
    let values = prob.natural(&z);
    let mut params: Vec<FitParam> = specs
        .iter()
        .zip(&values)
        .map(|(s, &v)| FitParam {
            name: s.name.clone(),
            unit: s.unit.clone(),
            value: v,
            std_err: None,
        })
        .collect();
    // d(natural)/d(internal) per free parameter.
    let scale: Vec<f64> = prob
        .free
        .iter()
        .map(|&i| match specs[i].transform {
            Transform::Linear => 1.0,
            Transform::Log => values[i],
        })
        .collect();
    let mut covariance = None;
    if let Some(inv) = &curvature {
        for (a, &i) in prob.free.iter().enumerate() {
            if inv.defined[a] {
                params[i].std_err = Some(scale[a] * inv.cov[(a, a)].max(0.0).sqrt());
            }
        }
        if inv.defined.iter().all(|&d| d) {
            let mut full = vec![vec![0.0; specs.len()]; specs.len()];
            for (a, &i) in prob.free.iter().enumerate() {
                for (b, &j) in prob.free.iter().enumerate() {
                    full[i][j] = scale[a] * scale[b] * inv.cov[(a, b)];
                }
            }
            covariance = Some(full);
        }
    }
    Ok(FitResult {
        params,
        rss: cost,
        initial_rss,
        reduced_chi2,
        n_points,
        converged,
        iterations,
        covariance,
    })
}

/// Inverse curvature restricted to the identifiable parameters.
struct PartialInverse {
    /// Entries involving an undefined parameter are zero.
    cov: DMatrix<f64>,
    defined: Vec<bool>,
}

impl PartialInverse {
    fn scaled(mut self, s: f64) -> Self {
        self.cov *= s;
        self
    }
}

/// Relative eigenvalue below which the scaled curvature counts as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// `(J^T J)^{-1}` over the parameters the data constrain.
///
/// Singularity is judged on the correlation-scaled matrix so units do not
/// matter. Parameters with a sizeable share in a null direction are marked
/// undefined and dropped, and the remainder is inverted with them held fixed.
fn partial_inverse(jtj: &DMatrix<f64>) -> PartialInverse {
    let n = jtj.nrows();
    let mut defined: Vec<bool> = (0..n)
        .map(|i| jtj[(i, i)] > 0.0 && jtj[(i, i)].is_finite())
        .collect();
    loop {
        let idx: Vec<usize> = (0..n).filter(|&i| defined[i]).collect();
        let m = idx.len();
        let mut cov = DMatrix::zeros(n, n);
        if m == 0 {
            return PartialInverse { cov, defined };
        }
        let d: Vec<f64> = idx.iter().map(|&i| jtj[(i, i)].sqrt()).collect();
        let scaled = DMatrix::from_fn(m, m, |a, b| jtj[(idx[a], idx[b])] / (d[a] * d[b]));
        let eig = SymmetricEigen::new(scaled);
        let max = eig.eigenvalues.max();
        let null: Vec<usize> = (0..m)
            .filter(|&k| !(eig.eigenvalues[k] > SINGULAR_TOL * max))
            .collect();
        if null.is_empty() {
            let v = &eig.eigenvectors;
            let inv_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
            let inv = v * inv_l * v.transpose();
            for a in 0..m {
                for b in 0..m {
                    cov[(idx[a], idx[b])] = inv[(a, b)] / (d[a] * d[b]);
                }
            }
            return PartialInverse { cov, defined };
        }
        // Drop every parameter with weight in a null direction; at least the
        // largest component of each null vector goes, so the loop terminates.
        for &k in &null {
            let col = eig.eigenvectors.column(k);
            let big = col.amax();
            for a in 0..m {
                if col[a].abs() >= 0.1 * big {
                    defined[idx[a]] = false;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..5).map(f64::from).collect();
        let y = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let obs = Observations::new(x, y);
        let specs = [ParamSpec::linear("slope", "", 0.0), ParamSpec::linear("intercept", "", 0.0)];
        let fit = least_squares(
            |p, x| x.iter().map(|v| p[0] * v + p[1]).collect(),
            &obs,
            &specs,
            &LsOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert!((fit.value("slope") - 2.0).abs() < 1e-9);
        assert!((fit.value("intercept") - 1.0).abs() < 1e-9);
        assert!(fit.rss < 1e-18);
        assert!(fit.rss <= fit.initial_rss);
    }

    #[test]
    fn fixed_and_log_parameters() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let y = x.iter().map(|t| 3.0 * (-t / 1.7).exp() + 0.5).collect();
        let obs = Observations::new(x, y);
        let specs = [
            ParamSpec::log("amp", "", 1.0),
            ParamSpec::log("tau", "s", 1.0),
            ParamSpec::linear("offset", "", 0.5).fixed(),
        ];
        let fit = least_squares(
            |p, x| x.iter().map(|t| p[0] * (-t / p[1]).exp() + p[2]).collect(),
            &obs,
            &specs,
            &LsOptions::default(),
        )
        .unwrap();
        assert!((fit.value("tau") - 1.7).abs() < 1e-7);
        assert_eq!(fit.std_err("offset"), None);
    }

    #[test]
    fn singular_curvature_flags_errors() {
        let obs = Observations::new(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.5]);
        // p0 and p1 enter only as a sum.
        let specs = [ParamSpec::linear("p0", "", 0.0), ParamSpec::linear("p1", "", 0.0)];
        let fit = least_squares(
            |p, x| x.iter().map(|v| (p[0] + p[1]) * v).collect(),
            &obs,
            &specs,
            &LsOptions::default(),
        )
        .unwrap();
        assert!(fit.std_err("p0").is_none());
        assert!(fit.covariance.is_none());
        assert!(fit.rss <= fit.initial_rss);
    }

    #[test]
    fn unconstrained_parameter_keeps_others_errors() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y = x.iter().map(|v| 3.0 * v - 1.0 + 0.1 * (v * 7.0).sin()).collect();
        // `ghost` has no effect on the model.
        let specs = [
            ParamSpec::linear("slope", "", 0.0),
            ParamSpec::linear("intercept", "", 0.0),
            ParamSpec::linear("ghost", "", 1.0),
        ];
        let fit = least_squares(
            |p, x| x.iter().map(|v| p[0] * v + p[1]).collect(),
            &Observations::new(x, y),
            &specs,
            &LsOptions::default(),
        )
        .unwrap();
        assert!(fit.std_err("ghost").is_none());
        assert!(fit.std_err("slope").unwrap() > 0.0);
        assert!(fit.std_err("intercept").unwrap() > 0.0);
        assert!(fit.covariance.is_none());
    }

    #[test]
    fn too_few_points() {
        let obs = Observations::new(vec![0.0], vec![1.0]);
        let specs = [ParamSpec::linear("a", "", 0.0), ParamSpec::linear("b", "", 0.0)];
        assert!(least_squares(|p, x| x.iter().map(|v| p[0] + p[1] * v).collect(), &obs, &specs, &LsOptions::default()).is_err());
    }

    #[test]
    fn excluded_points_are_ignored() {
        let obs = Observations::new(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 1.0, 100.0, 1.0])
            .with_excluded(vec![false, false, true, false]);
        let specs = [ParamSpec::linear("c", "", 0.0)];
        let fit = least_squares(|p, x| vec![p[0]; x.len()], &obs, &specs, &LsOptions::default()).unwrap();
        assert!((fit.value("c") - 1.0).abs() < 1e-9);
    }
}
