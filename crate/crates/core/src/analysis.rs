//! Critical-point location from susceptibility peaks, correlator decay
//! fits, joint fits with a shared exponent, snapshot bootstrap, and
//! sweep-rate scans.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt, TerminationReason};
use nalgebra::storage::Owned;
use nalgebra::{DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve_unitary_observed, linear_ramp, StepControl};
use crate::hamiltonian::Hamiltonian;
use crate::measurement::SnapshotSet;
use crate::observables::CorrelatorSeries;
use crate::spectrum::{ground_state_with, SolverOptions};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Susceptibility
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SusceptibilityConfig {
    /// Savitzky-Golay window on the raw grid, in points.
    pub pre_window: usize,
    pub pre_order: usize,
    /// Dense-grid density relative to the raw grid.
    pub refine: usize,
    /// Savitzky-Golay window on χ, in raw-grid points; scaled by `refine`
    /// on the dense grid.
    pub post_window: usize,
    pub post_order: usize,
}

impl Default for SusceptibilityConfig {
    fn default() -> Self {
        Self {
            pre_window: 5,
            pre_order: 2,
            refine: 10,
            post_window: 11,
            post_order: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityScan {
    pub delta_grid: Vec<f64>,
    pub mean_n: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub dense_grid: Vec<f64>,
    pub interpolated: Vec<f64>,
    /// Central differences of the interpolated curve.
    pub chi_raw: Vec<f64>,
    /// χ after the wide smoothing pass.
    pub chi: Vec<f64>,
    pub delta_max: f64,
    pub chi_max: f64,
    /// False when χ is flat to rounding, so no peak is defined.
    pub unique: bool,
    /// The maximum sits on the first or last dense point.
    pub at_boundary: bool,
    pub config: SusceptibilityConfig,
}

impl SusceptibilityScan {
    /// Raw-grid table: delta, mean_n, smoothed.
    pub fn grid_csv(&self) -> String {
        let mut s = String::from("delta,mean_n,smoothed\n");
        for k in 0..self.delta_grid.len() {
            let _ = writeln!(s, "{},{},{}", self.delta_grid[k], self.mean_n[k], self.smoothed[k]);
        }
        s
    }

    /// Dense-grid table: delta, interpolated, chi_raw, chi.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,interpolated,chi_raw,chi\n");
        for k in 0..self.dense_grid.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.dense_grid[k], self.interpolated[k], self.chi_raw[k], self.chi[k]
            );
        }
        s
    }
}

fn check_window(window: usize, order: usize, n: usize, what: &str) -> Result<()> {
    if window % 2 == 0 || window <= order {
        return Err(Error::domain(format!(
            "{what} window must be odd and exceed the polynomial order"
        )));
    }
    if window > n {
        return Err(Error::domain(format!("{what} window of {window} exceeds {n} points")));
    }
    Ok(())
}

/// Savitzky-Golay smoothing generalised to non-uniform abscissae: a local
/// least-squares polynomial over `window` neighbours evaluated at each
/// point. Windows are shifted inward at the edges.
pub fn savitzky_golay(x: &[f64], y: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len();
    check_window(window, order, n, "smoothing")?;
    let half = window / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half).min(n - window);
        let xs = &x[lo..lo + window];
        let scale = ((xs[window - 1] - xs[0]) / 2.0).max(f64::MIN_POSITIVE);
        let a = DMatrix::from_fn(window, order + 1, |r, c| ((xs[r] - x[i]) / scale).powi(c as i32));
        let b = DVector::from_column_slice(&y[lo..lo + window]);
        let coef = a
            .svd(true, true)
            .solve(&b, 1e-14)
            .map_err(|e| Error::domain(format!("smoothing solve failed: {e}")))?;
        out.push(coef[0]);
    }
    Ok(out)
}

/// Natural cubic spline through (x, y), evaluated at `at`.
pub fn natural_spline(x: &[f64], y: &[f64], at: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::domain("spline needs at least two matching points"));
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives m with m_0 = m_{n-1} = 0 (Thomas algorithm).
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for j in 0..k {
            let i = j + 1;
            diag[j] = 2.0 * (h[i - 1] + h[i]);
            rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        for j in 1..k {
            let w = h[j] / diag[j - 1];
            diag[j] -= w * h[j];
            rhs[j] -= w * rhs[j - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for j in (0..k - 1).rev() {
            m[j + 1] = (rhs[j] - h[j + 1] * m[j + 2]) / diag[j];
        }
    }
    Ok(at
        .iter()
        .map(|&t| {
            let seg = match x.partition_point(|&xi| xi <= t) {
                0 => 0,
                p => (p - 1).min(n - 2),
            };
            let (x0, x1, hh) = (x[seg], x[seg + 1], h[seg]);
            let a = (x1 - t) / hh;
            let b = (t - x0) / hh;
            a * y[seg]
                + b * y[seg + 1]
                + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hh * hh / 6.0
        })
        .collect())
}

/// Smooth, interpolate, differentiate, smooth again, then take the peak.
pub fn susceptibility_peak(delta: &[f64], mean_n: &[f64], config: &SusceptibilityConfig) -> Result<SusceptibilityScan> {
    let n = delta.len();
    if mean_n.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: mean_n.len(),
        });
    }
    if n < 7 {
        return Err(Error::domain(format!("susceptibility scan needs at least 7 points, got {n}")));
    }
    if delta.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("detuning grid must be strictly increasing"));
    }
    if config.refine == 0 {
        return Err(Error::domain("refinement factor must be positive"));
    }
    let smoothed = savitzky_golay(delta, mean_n, config.pre_window, config.pre_order)?;

    let nd = (n - 1) * config.refine + 1;
    let (x0, x1) = (delta[0], delta[n - 1]);
    let step = (x1 - x0) / (nd - 1) as f64;
    let dense_grid: Vec<f64> = (0..nd)
        .map(|k| if k == nd - 1 { x1 } else { x0 + k as f64 * step })
        .collect();
    let interpolated = natural_spline(delta, &smoothed, &dense_grid)?;

    let chi_raw: Vec<f64> = (0..nd)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(nd - 1));
            (interpolated[b] - interpolated[a]) / (dense_grid[b] - dense_grid[a])
        })
        .collect();

    let post = (config.post_window.saturating_sub(1)) * config.refine + 1;
    check_window(config.post_window, config.post_order, n, "susceptibility")?;
    let chi = savitzky_golay(&dense_grid, &chi_raw, post, config.post_order)?;

    let (mut k_max, mut chi_max) = (0, f64::NEG_INFINITY);
    let mut chi_min = f64::INFINITY;
    for (k, &c) in chi.iter().enumerate() {
        if c > chi_max {
            k_max = k;
            chi_max = c;
        }
        chi_min = chi_min.min(c);
    }
    let scale = chi_max.abs().max(chi_min.abs()).max(f64::MIN_POSITIVE);
    let unique = chi_max - chi_min > 1e-8 * scale;
    let at_boundary = k_max == 0 || k_max == nd - 1;
    let mut delta_max = dense_grid[k_max];
    if !at_boundary {
        let (ym, y0, yp) = (chi[k_max - 1], chi[k_max], chi[k_max + 1]);
        let denom = ym - 2.0 * y0 + yp;
        if denom < 0.0 {
            let shift = 0.5 * (ym - yp) / denom;
            delta_max += shift.clamp(-0.5, 0.5) * (dense_grid[k_max + 1] - dense_grid[k_max - 1]) / 2.0;
        }
    }
    Ok(SusceptibilityScan {
        delta_grid: delta.to_vec(),
        mean_n: mean_n.to_vec(),
        smoothed,
        dense_grid,
        interpolated,
        chi_raw,
        chi,
        delta_max,
        chi_max,
        unique,
        at_boundary,
        config: *config,
    })
}

// ---------------------------------------------------------------------------
// Correlator fits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    /// A δ^{−2Δσ}
    Power,
    /// A e^{−δ/ξ}
    Exponential,
    /// A δ^{−2Δσ} e^{−δ/ξ}
    PowerTimesExponential,
    /// A (T / sinh(πTδ))^{2Δσ}
    FiniteTCft,
}

impl Model {
    fn has_exponent(self) -> bool {
        self != Model::Exponential
    }

    fn has_scale(self) -> bool {
        self != Model::Power
    }

    fn is_linear_in_log(self) -> bool {
        self != Model::FiniteTCft
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitRange {
    pub min_distance: f64,
    pub max_distance: Option<f64>,
    /// The largest-distance bin is dropped when it holds fewer pairs.
    pub min_last_bin_count: usize,
}

impl Default for FitRange {
    fn default() -> Self {
        Self {
            min_distance: 1.5,
            max_distance: None,
            min_last_bin_count: 4,
        }
    }
}

impl FitRange {
    pub fn everything() -> Self {
        Self {
            min_distance: f64::MIN_POSITIVE,
            max_distance: None,
            min_last_bin_count: 0,
        }
    }

    pub fn apply(&self, series: &CorrelatorSeries) -> CorrelatorSeries {
        let kept = series.filtered(|d, _| d >= self.min_distance && self.max_distance.is_none_or(|m| d <= m));
        match kept.counts.last() {
            Some(&c) if c < self.min_last_bin_count => {
                let last = kept.distances[kept.len() - 1];
                kept.filtered(|d, _| d != last)
            }
            _ => kept,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Inverse variance from per-bin standard errors when every bin has one.
    #[default]
    Auto,
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Log-space least squares when all values are positive, else direct.
    #[default]
    Auto,
    Direct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub range: FitRange,
    pub weighting: Weighting,
    pub mode: FitMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    Log,
    Direct,
}

/// Per-series parameters of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesParams {
    pub amplitude: f64,
    /// Inverse decay length as fitted; may be ≤ 0.
    pub kappa: Option<f64>,
    /// 1/κ when κ > 0.
    pub xi: Option<f64>,
    pub temperature: Option<f64>,
    pub n_points: usize,
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incompatibility {
    /// Sum of the residual sums of squares of the separate fits.
    pub baseline_rss: f64,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failed: usize,
    /// Successful replicates whose value was infinite or NaN; left out of
    /// the moments.
    pub non_finite: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub p15_8: f64,
    pub p84: f64,
    pub skewness: f64,
    /// |skewness| above the threshold: quote the percentile interval.
    pub asymmetric: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: Model,
    pub space: Space,
    /// Log mode was requested but a non-positive value forced direct mode.
    pub fell_back: bool,
    pub scaling_dim: Option<f64>,
    /// 2Δσ.
    pub exponent: Option<f64>,
    pub series: Vec<SeriesParams>,
    /// Internal parameter vector and its covariance, named in order.
    pub parameter_names: Vec<String>,
    pub parameters: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// sqrt of the weighted residual sum of squares in fit space.
    pub residual_norm: f64,
    pub n_points: usize,
    pub bic: f64,
    pub incompatibility: Option<Incompatibility>,
    pub bootstrap: Option<BTreeMap<String, BootstrapSummary>>,
}

impl FitResult {
    pub fn amplitude(&self) -> f64 {
        self.series[0].amplitude
    }

    pub fn xi(&self) -> Option<f64> {
        self.series[0].xi
    }

    pub fn temperature(&self) -> Option<f64> {
        self.series[0].temperature
    }

    pub fn rss(&self) -> f64 {
        self.residual_norm * self.residual_norm
    }

    fn param_std(&self, name: &str) -> Option<f64> {
        let i = self.parameter_names.iter().position(|p| p == name)?;
        Some(self.covariance[i][i].max(0.0).sqrt())
    }

    /// Standard error of Δσ from the fit covariance.
    pub fn scaling_dim_stderr(&self) -> Option<f64> {
        self.param_std("exponent").map(|s| s / 2.0)
    }

    /// Fitted model value of series `s` at distance `x`.
    pub fn evaluate(&self, s: usize, x: f64) -> Option<f64> {
        let p = self.series.get(s)?;
        let k = match self.model {
            Model::FiniteTCft => p.temperature.map(|t| t * t)?,
            _ => p.kappa.unwrap_or(0.0),
        };
        let engine = Engine {
            model: self.model,
            space: Space::Direct,
            series: vec![],
        };
        let (g, _, _) = engine.shape(x, k, self.exponent.unwrap_or(0.0))?;
        Some(p.amplitude * g.exp())
    }

    /// Standard error of ξ of the first series, by the delta method.
    pub fn xi_stderr(&self) -> Option<f64> {
        let kappa = self.series[0].kappa?;
        let s = self.param_std("kappa[0]")?;
        (kappa > 0.0).then(|| s / (kappa * kappa))
    }
}

/// ln(sinh(x)/x) for x ≥ 0.
fn ln_sinhc(x: f64) -> f64 {
    if x < 1e-4 {
        let x2 = x * x;
        x2 / 6.0 - x2 * x2 / 180.0
    } else if x < 20.0 {
        (x.sinh() / x).ln()
    } else {
        x - std::f64::consts::LN_2 - x.ln() + (-(-2.0 * x).exp()).ln_1p()
    }
}

/// L(u) = ln(sinh(√u)/√u), continued analytically to u < 0; returns the
/// value and dL/du. `None` past the first zero of sin.
fn sinhc_log_u(u: f64) -> Option<(f64, f64)> {
    if u.abs() < 1e-8 {
        return Some((u / 6.0 - u * u / 180.0, 1.0 / 6.0 - u / 90.0));
    }
    if u > 0.0 {
        let x = u.sqrt();
        let q = if x < 20.0 { x / x.tanh() - 1.0 } else { x - 1.0 };
        Some((ln_sinhc(x), q / (2.0 * u)))
    } else {
        let y = (-u).sqrt();
        if y >= std::f64::consts::PI - 1e-6 {
            return None;
        }
        Some(((y.sin() / y).ln(), (1.0 - y / y.tan()) / (2.0 * y * y)))
    }
}

/// Fit points of one series: abscissa, target (ln C in log space), and
/// square-root weights.
#[derive(Clone, Debug)]
struct Points {
    x: Vec<f64>,
    y: Vec<f64>,
    sw: Vec<f64>,
}

/// Parameter layout: per series [a_s, k_s?], then the shared exponent.
/// a is ln A (log space) or A (direct); k is κ, or τ = T² for the CFT form.
#[derive(Clone, Debug)]
struct Engine {
    model: Model,
    space: Space,
    series: Vec<Points>,
}

impl Engine {
    fn per_series(&self) -> usize {
        1 + self.model.has_scale() as usize
    }

    fn n_params(&self) -> usize {
        self.series.len() * self.per_series() + self.model.has_exponent() as usize
    }

    fn n_points(&self) -> usize {
        self.series.iter().map(|p| p.x.len()).sum()
    }

    fn exp_index(&self) -> Option<usize> {
        self.model
            .has_exponent()
            .then(|| self.series.len() * self.per_series())
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let amp = match self.space {
            Space::Log => "ln_amplitude",
            Space::Direct => "amplitude",
        };
        let scale = if self.model == Model::FiniteTCft { "tau" } else { "kappa" };
        for s in 0..self.series.len() {
            out.push(format!("{amp}[{s}]"));
            if self.model.has_scale() {
                out.push(format!("{scale}[{s}]"));
            }
        }
        if self.model.has_exponent() {
            out.push("exponent".into());
        }
        out
    }

    /// g(δ) and its gradient with respect to (k, e), where the model is
    /// A e^{g}.
    fn shape(&self, x: f64, k: f64, e: f64) -> Option<(f64, f64, f64)> {
        match self.model {
            Model::Power => Some((-e * x.ln(), 0.0, -x.ln())),
            Model::Exponential => Some((-k * x, -x, 0.0)),
            Model::PowerTimesExponential => Some((-e * x.ln() - k * x, -x, -x.ln())),
            Model::FiniteTCft => {
                let c = std::f64::consts::PI * x;
                let (l, dl) = sinhc_log_u(c * c * k)?;
                let h = -c.ln() - l;
                Some((e * h, -e * dl * c * c, h))
            }
        }
    }

    fn residuals_and_jacobian(&self, theta: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let (m, p) = (self.n_points(), self.n_params());
        let mut r = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, p);
        let ps = self.per_series();
        let ei = self.exp_index();
        let e = ei.map_or(0.0, |i| theta[i]);
        let mut row = 0;
        for (s, pts) in self.series.iter().enumerate() {
            let ai = s * ps;
            let ki = self.model.has_scale().then_some(ai + 1);
            let a = theta[ai];
            let k = ki.map_or(0.0, |i| theta[i]);
            for q in 0..pts.x.len() {
                let (g, dk, de) = self.shape(pts.x[q], k, e)?;
                let w = pts.sw[q];
                match self.space {
                    Space::Log => {
                        r[row] = w * (a + g - pts.y[q]);
                        j[(row, ai)] = w;
                        if let Some(i) = ki {
                            j[(row, i)] = w * dk;
                        }
                        if let Some(i) = ei {
                            j[(row, i)] = w * de;
                        }
                    }
                    Space::Direct => {
                        let eg = g.exp();
                        r[row] = w * (a * eg - pts.y[q]);
                        j[(row, ai)] = w * eg;
                        if let Some(i) = ki {
                            j[(row, i)] = w * a * eg * dk;
                        }
                        if let Some(i) = ei {
                            j[(row, i)] = w * a * eg * de;
                        }
                    }
                }
                row += 1;
            }
        }
        if r.iter().chain(j.iter()).all(|v| v.is_finite()) {
            Some((r, j))
        } else {
            None
        }
    }

    fn rss(&self, theta: &[f64]) -> f64 {
        self.residuals_and_jacobian(theta)
            .map_or(f64::INFINITY, |(r, _)| r.norm_squared())
    }
}

struct Problem<'a> {
    engine: &'a Engine,
    theta: DVector<f64>,
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for Problem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.theta.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.theta.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        self.engine.residuals_and_jacobian(self.theta.as_slice()).map(|(r, _)| r)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        self.engine.residuals_and_jacobian(self.theta.as_slice()).map(|(_, j)| j)
    }
}

const RANK_TOL: f64 = 1e-10;

/// Column-scaled SVD rank check; returns (column scales, V, singular values).
fn conditioned_svd(j: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>, DVector<f64>)> {
    let scales: Vec<f64> = j.column_iter().map(|c| c.norm()).collect();
    if scales.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::DegenerateFit("a parameter does not affect the model".into()));
    }
    let mut jn = j.clone();
    for (c, s) in scales.iter().enumerate() {
        jn.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = jn.svd(false, true);
    let sv = svd.singular_values.clone();
    let (max, min) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    if !(min > RANK_TOL * max) {
        return Err(Error::DegenerateFit(format!(
            "Jacobian is rank deficient (condition {:.3e})",
            max / min
        )));
    }
    let v = svd.v_t.expect("requested").transpose();
    Ok((scales, v, sv))
}

/// Gauss-Newton step solved by SVD; exact for the log-linear models.
fn linear_solve(engine: &Engine, theta0: &[f64]) -> Result<Vec<f64>> {
    let (r, j) = engine
        .residuals_and_jacobian(theta0)
        .ok_or_else(|| Error::DegenerateFit("model not finite at the starting point".into()))?;
    let (scales, _, _) = conditioned_svd(&j)?;
    let mut jn = j;
    for (c, s) in scales.iter().enumerate() {
        jn.column_mut(c).scale_mut(1.0 / s);
    }
    let step = jn
        .svd(true, true)
        .solve(&(-r), 0.0)
        .map_err(|e| Error::DegenerateFit(format!("least-squares solve failed: {e}")))?;
    Ok(theta0.iter().enumerate().map(|(i, t)| t + step[i] / scales[i]).collect())
}

fn lm_solve(engine: &Engine, theta0: &[f64]) -> Result<Vec<f64>> {
    let problem = Problem {
        engine,
        theta: DVector::from_column_slice(theta0),
    };
    let (solved, report) = LevenbergMarquardt::new().with_patience(400).minimize(problem);
    match report.termination {
        t if t.was_successful() => Ok(solved.theta.as_slice().to_vec()),
        TerminationReason::NoImprovementPossible(_) => Ok(solved.theta.as_slice().to_vec()),
        TerminationReason::LostPatience => Err(Error::Convergence {
            what: "correlator fit".into(),
            iterations: report.number_of_evaluations,
            residual: (2.0 * report.objective_function).sqrt(),
        }),
        other => Err(Error::DegenerateFit(format!("nonlinear fit stopped: {other:?}"))),
    }
}

/// Closed-form weighted fit of t = a + e·h; returns (a, e, rss).
fn wls_line(h: &[f64], t: &[f64], sw: &[f64]) -> (f64, f64, f64) {
    let (mut sww, mut sh, mut st, mut shh, mut sht) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for q in 0..h.len() {
        let w = sw[q] * sw[q];
        sww += w;
        sh += w * h[q];
        st += w * t[q];
        shh += w * h[q] * h[q];
        sht += w * h[q] * t[q];
    }
    let det = sww * shh - sh * sh;
    if det.abs() <= 1e-300 {
        return (st / sww, 0.0, f64::INFINITY);
    }
    let e = (sww * sht - sh * st) / det;
    let a = (st - e * sh) / sww;
    let rss = (0..h.len())
        .map(|q| (sw[q] * (a + e * h[q] - t[q])).powi(2))
        .sum();
    (a, e, rss)
}

/// Profile the CFT form over T for one log-space series; returns (ln A, τ, e).
fn cft_profile(pts: &Points) -> (f64, f64, f64) {
    let at = |t: f64| {
        let h: Vec<f64> = pts
            .x
            .iter()
            .map(|&x| -(std::f64::consts::PI * x).ln() - ln_sinhc(std::f64::consts::PI * t * x))
            .collect();
        wls_line(&h, &pts.y, &pts.sw)
    };
    let xmin = pts.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = pts.x.iter().cloned().fold(0.0, f64::max);
    let (lo, hi) = ((1e-3 / xmax).ln(), (3.0 / xmin).ln());
    let steps = 48;
    let mut grid = vec![0.0];
    grid.extend((0..=steps).map(|k| (lo + (hi - lo) * k as f64 / steps as f64).exp()));
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| (k, at(t).2))
        .fold((0, f64::INFINITY), |acc, (k, r)| if r < acc.1 { (k, r) } else { acc });
    let left = grid[best.saturating_sub(1)];
    let right = grid[(best + 1).min(grid.len() - 1)];
    // Golden section on [left, right].
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (left, right);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (at(c).2, at(d).2);
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = at(c).2;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = at(d).2;
        }
    }
    let mut t = 0.5 * (a + b);
    if at(grid[best]).2 < at(t).2 {
        t = grid[best];
    }
    let (la, e, _) = at(t);
    (la, t * t, e)
}

/// Deterministic start for direct mode: exponent from the log-log slope of
/// the first half, κ from the semilog slope of the last half, amplitude
/// from the first point.
fn direct_start(model: Model, pts: &Points) -> (f64, f64, f64) {
    let n = pts.x.len();
    let half = n.div_ceil(2);
    let slope = |idx: std::ops::Range<usize>, logx: bool| -> Option<f64> {
        let sel: Vec<usize> = idx.filter(|&q| pts.y[q] > 0.0).collect();
        if sel.len() < 2 {
            return None;
        }
        let h: Vec<f64> = sel.iter().map(|&q| if logx { pts.x[q].ln() } else { pts.x[q] }).collect();
        let t: Vec<f64> = sel.iter().map(|&q| pts.y[q].ln()).collect();
        let (_, s, rss) = wls_line(&h, &t, &vec![1.0; sel.len()]);
        rss.is_finite().then_some(s)
    };
    let e = match model {
        Model::Exponential => 0.0,
        _ => slope(0..half, true).map_or(0.25, |s| -s),
    };
    let kappa = match model {
        Model::Power => 0.0,
        _ => slope(n - half..n, false).map_or(0.0, |s| (-s).max(0.0)),
    };
    let k = if model == Model::FiniteTCft {
        if e > 0.0 {
            (kappa / (e * std::f64::consts::PI)).powi(2)
        } else {
            0.0
        }
    } else {
        kappa
    };
    let probe = Engine {
        model,
        space: Space::Direct,
        series: vec![],
    };
    let g0 = probe.shape(pts.x[0], k, e).map_or(0.0, |v| v.0);
    (pts.y[0] / g0.exp(), k, e)
}

/// Magnitude below which every correlator value counts as zero.
pub const VANISHING_CORRELATOR: f64 = 1e-12;

fn prepare(series: &CorrelatorSeries, opts: &FitOptions) -> Result<CorrelatorSeries> {
    if series.values.iter().chain(&series.distances).any(|v| !v.is_finite()) {
        return Err(Error::domain("correlator series holds non-finite entries"));
    }
    let s = opts.range.apply(series);
    if s.distances.iter().any(|&d| d <= 0.0) {
        return Err(Error::domain("fit range includes non-positive distances"));
    }
    // Occupation correlators are bounded by one; anything this small is
    // rounding left over from a subtraction, not signal.
    if s.values.iter().all(|v| v.abs() < VANISHING_CORRELATOR) {
        return Err(Error::DegenerateFit("correlator vanishes within rounding".into()));
    }
    Ok(s)
}

fn weights(series: &CorrelatorSeries, opts: &FitOptions, space: Space) -> (Vec<f64>, bool) {
    let se = match (opts.weighting, &series.stderr) {
        (Weighting::Auto, Some(se)) if se.iter().all(|&e| e > 0.0 && e.is_finite()) => se,
        _ => return (vec![1.0; series.len()], false),
    };
    let sw = (0..series.len())
        .map(|k| match space {
            Space::Log => series.values[k].abs() / se[k],
            Space::Direct => 1.0 / se[k],
        })
        .collect();
    (sw, true)
}

fn run_engine(model: Model, list: &[CorrelatorSeries], opts: &FitOptions) -> Result<FitResult> {
    if list.is_empty() {
        return Err(Error::domain("no series to fit"));
    }
    let prepared: Vec<CorrelatorSeries> = list.iter().map(|s| prepare(s, opts)).collect::<Result<_>>()?;
    let all_positive = prepared.iter().all(|s| s.values.iter().all(|&v| v > 0.0));
    let space = match opts.mode {
        FitMode::Auto if all_positive => Space::Log,
        _ => Space::Direct,
    };
    let fell_back = opts.mode == FitMode::Auto && space == Space::Direct;
    let mut known_variance = true;
    let series: Vec<Points> = prepared
        .iter()
        .map(|s| {
            let (sw, known) = weights(s, opts, space);
            known_variance &= known;
            Points {
                x: s.distances.clone(),
                y: match space {
                    Space::Log => s.values.iter().map(|v| v.ln()).collect(),
                    Space::Direct => s.values.clone(),
                },
                sw,
            }
        })
        .collect();
    let engine = Engine { model, space, series };
    let (n, p) = (engine.n_points(), engine.n_params());
    for (s, pts) in engine.series.iter().enumerate() {
        let own = engine.per_series() + model.has_exponent() as usize;
        if pts.x.len() < own + 1 {
            return Err(Error::DegenerateFit(format!(
                "series {s} has {} points in range; the model needs at least {}",
                pts.x.len(),
                own + 1
            )));
        }
    }

    let theta = if space == Space::Log && model.is_linear_in_log() {
        linear_solve(&engine, &vec![0.0; p])?
    } else {
        let ps = engine.per_series();
        let mut theta0 = vec![0.0; p];
        let mut exps = Vec::new();
        for (s, pts) in engine.series.iter().enumerate() {
            let (a, k, e) = match (space, model) {
                (Space::Log, _) => cft_profile(pts),
                (Space::Direct, _) => direct_start(model, pts),
            };
            theta0[s * ps] = a;
            if model.has_scale() {
                theta0[s * ps + 1] = k;
            }
            exps.push(e);
        }
        if let Some(i) = engine.exp_index() {
            theta0[i] = exps.iter().sum::<f64>() / exps.len() as f64;
        }
        // τ < 0 is the analytic continuation to imaginary T, which is
        // outside the model; keep the constrained start in that case.
        let admissible = |t: &[f64]| {
            model != Model::FiniteTCft || (0..engine.series.len()).all(|s| t[s * engine.per_series() + 1] >= 0.0)
        };
        match lm_solve(&engine, &theta0) {
            Ok(t) if admissible(&t) && engine.rss(&t) <= engine.rss(&theta0) => t,
            Ok(_) => theta0,
            Err(e) if space == Space::Log => {
                log::debug!("nonlinear polish failed ({e}); keeping the profile estimate");
                theta0
            }
            Err(e) => return Err(e),
        }
    };

    let (r, j) = engine
        .residuals_and_jacobian(&theta)
        .ok_or_else(|| Error::DegenerateFit("model not finite at the solution".into()))?;
    let (scales, v, sv) = conditioned_svd(&j)?;
    let rss = r.norm_squared();
    let sigma2 = if known_variance || n <= p { 1.0 } else { rss / (n - p) as f64 };
    let mut cov = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            let mut acc = 0.0;
            for k in 0..sv.len() {
                acc += v[(a, k)] * v[(b, k)] / (sv[k] * sv[k]);
            }
            cov[a][b] = sigma2 * acc / (scales[a] * scales[b]);
        }
    }

    let ps = engine.per_series();
    let exponent = engine.exp_index().map(|i| theta[i]);
    let mut offset = 0;
    let series_params = engine
        .series
        .iter()
        .enumerate()
        .map(|(s, pts)| {
            let a = theta[s * ps];
            let k = model.has_scale().then(|| theta[s * ps + 1]);
            let len = pts.x.len();
            let res = r.as_slice()[offset..offset + len].to_vec();
            offset += len;
            let (kappa, temperature) = match model {
                Model::FiniteTCft => (None, k.map(f64::sqrt)),
                _ => (k, None),
            };
            SeriesParams {
                amplitude: match space {
                    Space::Log => a.exp(),
                    Space::Direct => a,
                },
                kappa,
                xi: kappa.filter(|&k| k > 0.0).map(|k| 1.0 / k),
                temperature,
                n_points: len,
                residuals: res,
            }
        })
        .collect();
    let nf = n as f64;
    Ok(FitResult {
        model,
        space,
        fell_back,
        scaling_dim: exponent.map(|e| e / 2.0),
        exponent,
        series: series_params,
        parameter_names: engine.names(),
        parameters: theta,
        covariance: cov,
        residual_norm: rss.sqrt(),
        n_points: n,
        bic: nf * (rss / nf).max(1e-300).ln() + p as f64 * nf.ln(),
        incompatibility: None,
        bootstrap: None,
    })
}

/// Fit one correlator series.
pub fn fit_correlator(series: &CorrelatorSeries, model: Model, opts: &FitOptions) -> Result<FitResult> {
    run_engine(model, std::slice::from_ref(series), opts)
}

/// Residual-sum ratio above which a joint fit is flagged.
pub const INCOMPATIBILITY_RATIO: f64 = 5.0;

/// Simultaneous fit with a shared exponent and per-series amplitude and
/// decay scale. Flags incompatibility when the joint residual sum exceeds
/// five times that of the separate fits.
pub fn joint_fit(list: &[CorrelatorSeries], model: Model, opts: &FitOptions) -> Result<FitResult> {
    if list.is_empty() {
        return Err(Error::domain("joint fit needs at least one series"));
    }
    let mut joint = run_engine(model, list, opts)?;
    if list.len() == 1 {
        return Ok(joint);
    }
    let baseline: f64 = list
        .iter()
        .map(|s| fit_correlator(s, model, opts).map(|f| f.rss()))
        .sum::<Result<f64>>()?;
    let rss = joint.rss();
    // Floor so exact data does not flag on rounding alone.
    let floor = 1e-20 * joint.n_points as f64;
    let ratio = if baseline > 0.0 { rss / baseline } else if rss > floor { f64::INFINITY } else { 1.0 };
    joint.incompatibility = Some(Incompatibility {
        baseline_rss: baseline,
        ratio,
        flagged: rss > floor && ratio > INCOMPATIBILITY_RATIO,
    });
    Ok(joint)
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub skew_threshold: f64,
    pub max_failure_fraction: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 0x0b00_7572_6170,
            skew_threshold: 0.5,
            max_failure_fraction: 0.1,
        }
    }
}

/// Linear-interpolation percentile of sorted data, q in [0, 100].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Moments and percentiles of bootstrap values.
pub fn summarize(values: &[f64], failed: usize, skew_threshold: f64) -> BootstrapSummary {
    let mut finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let non_finite = values.len() - finite.len();
    finite.sort_by(f64::total_cmp);
    let m = finite.len();
    if m == 0 {
        return BootstrapSummary {
            replicates: values.len() + failed,
            failed,
            non_finite,
            mean: f64::NAN,
            std: f64::NAN,
            median: f64::NAN,
            p15_8: f64::NAN,
            p84: f64::NAN,
            skewness: f64::NAN,
            asymmetric: false,
        };
    }
    let mean = finite.iter().sum::<f64>() / m as f64;
    let m2 = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
    let m3 = finite.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / m as f64;
    let std = if m > 1 { (m2 * m as f64 / (m - 1) as f64).sqrt() } else { 0.0 };
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    BootstrapSummary {
        replicates: values.len() + failed,
        failed,
        non_finite,
        mean,
        std,
        median: percentile(&finite, 50.0),
        p15_8: percentile(&finite, 15.8),
        p84: percentile(&finite, 84.0),
        skewness,
        asymmetric: skewness.abs() > skew_threshold,
    }
}

/// Resample shots M-out-of-M with replacement and rerun `estimator` on
/// each replicate. Replicate b draws from its own stream of the seed, so
/// results do not depend on scheduling. Returns one summary per estimator
/// output.
pub fn bootstrap_many<F>(snaps: &SnapshotSet, opts: &BootstrapOptions, estimator: F) -> Result<Vec<BootstrapSummary>>
where
    F: Fn(&SnapshotSet) -> Result<Vec<f64>> + Sync,
{
    if opts.replicates < 2 {
        return Err(Error::domain("bootstrap needs at least two replicates"));
    }
    let m = snaps.n_shots();
    if m == 0 {
        return Err(Error::domain("bootstrap needs at least one snapshot"));
    }
    let outcomes: Vec<Result<Vec<f64>>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
            estimator(&snaps.resampled(&idx))
        })
        .collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(v) => rows.push(v),
            Err(e) => {
                log::debug!("bootstrap replicate dropped: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > opts.max_failure_fraction * opts.replicates as f64 {
        return Err(Error::BootstrapInstability {
            failed,
            total: opts.replicates,
        });
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::domain("estimator returned a varying number of outputs"));
    }
    Ok((0..width)
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            summarize(&col, failed, opts.skew_threshold)
        })
        .collect())
}

/// Scalar form of [`bootstrap_many`].
pub fn bootstrap<F>(snaps: &SnapshotSet, opts: &BootstrapOptions, estimator: F) -> Result<BootstrapSummary>
where
    F: Fn(&SnapshotSet) -> Result<f64> + Sync,
{
    let mut out = bootstrap_many(snaps, opts, |s| estimator(s).map(|v| vec![v]))?;
    Ok(out.remove(0))
}

/// Fit the correlator of `snaps`, then bootstrap the whole
/// correlator-and-fit pipeline for Δσ, ξ and T.
pub fn fit_with_bootstrap<F>(
    snaps: &SnapshotSet,
    correlator: F,
    model: Model,
    fit: &FitOptions,
    boot: &BootstrapOptions,
) -> Result<FitResult>
where
    F: Fn(&SnapshotSet) -> Result<CorrelatorSeries> + Sync,
{
    let mut result = fit_correlator(&correlator(snaps)?, model, fit)?;
    let summaries = bootstrap_many(snaps, boot, |s| {
        let r = fit_correlator(&correlator(s)?, model, fit)?;
        Ok(vec![
            r.scaling_dim.unwrap_or(f64::NAN),
            r.xi().unwrap_or(f64::INFINITY),
            r.temperature().unwrap_or(f64::NAN),
        ])
    })?;
    let mut map = BTreeMap::new();
    for (name, s) in ["scaling_dim", "xi", "temperature"].iter().zip(summaries) {
        let present = match *name {
            "scaling_dim" => model.has_exponent(),
            "xi" => model.has_scale() && model != Model::FiniteTCft,
            _ => model == Model::FiniteTCft,
        };
        if present {
            map.insert(name.to_string(), s);
        }
    }
    result.bootstrap = Some(map);
    Ok(result)
}

// ---------------------------------------------------------------------------
// Sweep-rate scans
// ---------------------------------------------------------------------------

/// Anything that can report ⟨n⟩ along a linear detuning sweep.
pub trait KzSimulator: Sync {
    /// Sweep Δ linearly from `start` to `end` at |dΔ/dt| = `rate`, starting
    /// in the ground state at `start`; return the mean Rydberg density when
    /// Δ passes each of `samples` (ordered along the sweep).
    fn sweep(&self, start: f64, end: f64, rate: f64, samples: &[f64]) -> Result<Vec<f64>>;
}

/// Closed-system sweep of a Hamiltonian template at fixed Ω.
pub struct UnitarySweep {
    pub hamiltonian: Hamiltonian,
    pub step: StepControl,
    pub solver: SolverOptions,
}

impl UnitarySweep {
    pub fn new(hamiltonian: Hamiltonian) -> Self {
        Self {
            hamiltonian,
            step: StepControl::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl KzSimulator for UnitarySweep {
    fn sweep(&self, start: f64, end: f64, rate: f64, samples: &[f64]) -> Result<Vec<f64>> {
        let omega = self.hamiltonian.spec().omega;
        let ramp = linear_ramp(start, end, rate, omega)?;
        let (_, psi0) = ground_state_with(&self.hamiltonian.with_delta(start), &self.solver)?;
        let total = ramp.total_time();
        let times: Vec<f64> = samples
            .iter()
            .map(|&d| ((d - start).abs() / rate).clamp(0.0, total))
            .collect();
        let mut out = vec![f64::NAN; samples.len()];
        evolve_unitary_observed(&self.hamiltonian, &ramp, &psi0, &self.step, &times, |t, psi| {
            let dens = psi.site_densities();
            let mean = dens.iter().sum::<f64>() / dens.len() as f64;
            for (k, &tk) in times.iter().enumerate() {
                if (tk - t).abs() <= 1e-12 * t.abs().max(1.0) {
                    out[k] = mean;
                }
            }
        })?;
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::domain("sweep did not visit every sample point"));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KzScanConfig {
    pub delta_start: f64,
    pub delta_end: f64,
    /// Equally spaced Δ samples per sweep.
    pub points: usize,
    pub backward: bool,
    pub susceptibility: SusceptibilityConfig,
    /// Slowest two forward Δ_max values closer than this count as a plateau.
    pub plateau_tolerance: f64,
}

impl Default for KzScanConfig {
    fn default() -> Self {
        Self {
            delta_start: -crate::units::mhz(1.6),
            delta_end: 3.0 * crate::units::mhz(1.6),
            points: 50,
            backward: false,
            susceptibility: SusceptibilityConfig::default(),
            plateau_tolerance: 0.05 * crate::units::mhz(1.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KzPoint {
    pub rate: f64,
    pub delta_max: f64,
    pub unique: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub reached: bool,
    /// Δ_max at the slowest forward rate.
    pub delta_max: f64,
    /// |Δ_max(slowest) − Δ_max(second slowest)|.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KzScan {
    /// Sorted from fastest to slowest.
    pub forward: Vec<KzPoint>,
    pub backward: Option<Vec<KzPoint>>,
    /// Forward Δ_max does not increase as the rate drops.
    pub forward_monotone: bool,
    /// Backward Δ_max does not decrease as the rate drops.
    pub backward_monotone: Option<bool>,
    pub plateau: Option<Plateau>,
}

impl KzScan {
    /// Table: direction, rate, delta_max, unique.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("direction,rate,delta_max,unique\n");
        let sets = std::iter::once(("forward", &self.forward)).chain(self.backward.iter().map(|b| ("backward", b)));
        for (dir, pts) in sets {
            for p in pts {
                let _ = writeln!(s, "{dir},{},{},{}", p.rate, p.delta_max, p.unique);
            }
        }
        s
    }
}

/// Run linear sweeps at each rate, locate the susceptibility peak of each,
/// and diagnose convergence at slow rates.
pub fn kz_rate_scan(sim: &dyn KzSimulator, rates: &[f64], config: &KzScanConfig) -> Result<KzScan> {
    if rates.is_empty() {
        return Err(Error::domain("rate scan needs at least one rate"));
    }
    if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::domain("sweep rates must be positive and finite"));
    }
    if !(config.delta_end > config.delta_start) || config.points < 7 {
        return Err(Error::domain("rate scan needs start < end and at least 7 samples"));
    }
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[b].total_cmp(&rates[a]));
    let np = config.points;
    let grid: Vec<f64> = (0..np)
        .map(|k| config.delta_start + (config.delta_end - config.delta_start) * k as f64 / (np - 1) as f64)
        .collect();
    let directions: Vec<bool> = if config.backward { vec![true, false] } else { vec![true] };
    let jobs: Vec<(bool, usize)> = directions
        .iter()
        .flat_map(|&fwd| order.iter().map(move |&i| (fwd, i)))
        .collect();
    let points: Vec<KzPoint> = jobs
        .par_iter()
        .map(|&(forward, i)| {
            let wrap = |e: Error| Error::AtGridPoint {
                index: i,
                source: Box::new(e),
            };
            let n = if forward {
                sim.sweep(config.delta_start, config.delta_end, rates[i], &grid)
            } else {
                let rev: Vec<f64> = grid.iter().rev().cloned().collect();
                sim.sweep(config.delta_end, config.delta_start, rates[i], &rev).map(|mut v| {
                    v.reverse();
                    v
                })
            }
            .map_err(wrap)?;
            let scan = susceptibility_peak(&grid, &n, &config.susceptibility).map_err(wrap)?;
            Ok(KzPoint {
                rate: rates[i],
                delta_max: scan.delta_max,
                unique: scan.unique,
            })
        })
        .collect::<Result<_>>()?;
    let (forward, backward) = points.split_at(order.len());
    let forward = forward.to_vec();
    let backward = config.backward.then(|| backward.to_vec());
    let forward_monotone = forward.windows(2).all(|w| w[1].delta_max <= w[0].delta_max);
    let backward_monotone = backward
        .as_ref()
        .map(|b| b.windows(2).all(|w| w[1].delta_max >= w[0].delta_max));
    let plateau = (forward.len() >= 2).then(|| {
        let a = &forward[forward.len() - 1];
        let b = &forward[forward.len() - 2];
        let spread = (a.delta_max - b.delta_max).abs();
        Plateau {
            reached: spread <= config.plateau_tolerance,
            delta_max: a.delta_max,
            spread,
        }
    });
    Ok(KzScan {
        forward,
        backward,
        forward_monotone,
        backward_monotone,
        plateau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(x: &[f64], f: impl Fn(f64) -> f64) -> CorrelatorSeries {
        CorrelatorSeries {
            distances: x.to_vec(),
            values: x.iter().map(|&d| f(d)).collect(),
            stderr: None,
            counts: vec![10; x.len()],
            connected: false,
        }
    }

    fn xs() -> Vec<f64> {
        (1..=20).map(|k| k as f64).collect()
    }

    #[test]
    fn spline_reproduces_cubic_free_line() {
        let x = [0.0, 0.3, 1.0, 1.7, 2.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let at = [0.1, 1.2, 2.4];
        let s = natural_spline(&x, &y, &at).unwrap();
        for (v, t) in s.iter().zip(at) {
            assert!((v - (2.0 * t - 1.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn smoothing_keeps_quadratics() {
        let x: Vec<f64> = (0..12).map(|k| (k as f64).powf(1.3)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v * v - v + 3.0).collect();
        let s = savitzky_golay(&x, &y, 5, 2).unwrap();
        for (a, b) in s.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn logistic_peak() {
        let grid: Vec<f64> = (0..50).map(|k| -1.0 + 4.0 * k as f64 / 49.0).collect();
        let n: Vec<f64> = grid.iter().map(|d| 1.0 / (1.0 + (-(d - 1.1) / 0.25f64).exp())).collect();
        let scan = susceptibility_peak(&grid, &n, &SusceptibilityConfig::default()).unwrap();
        assert!((scan.delta_max - 1.1).abs() < grid[1] - grid[0], "{}", scan.delta_max);
        assert!(scan.unique);
    }

    #[test]
    fn linear_density_has_no_peak() {
        let grid: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let n: Vec<f64> = grid.iter().map(|d| 0.3 * d + 0.1).collect();
        let scan = susceptibility_peak(&grid, &n, &SusceptibilityConfig::default()).unwrap();
        assert!(!scan.unique);
        for c in &scan.chi {
            assert!((c - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn susceptibility_rejects_bad_grids() {
        let g = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(susceptibility_peak(&g, &g, &SusceptibilityConfig::default()).is_err());
        let g = [0.0, 1.0, 2.0, 1.5, 4.0, 5.0, 6.0, 7.0];
        assert!(susceptibility_peak(&g, &g, &SusceptibilityConfig::default()).is_err());
    }

    #[test]
    fn exact_recovery_all_models() {
        let x = xs();
        let opts = FitOptions::default();
        let p = fit_correlator(&series(&x, |d| 0.2 * d.powf(-0.25)), Model::Power, &opts).unwrap();
        assert!((p.scaling_dim.unwrap() - 0.125).abs() < 1e-9);
        assert!((p.amplitude() - 0.2).abs() < 1e-9);

        let e = fit_correlator(&series(&x, |d| 0.7 * (-d / 4.0).exp()), Model::Exponential, &opts).unwrap();
        assert!((e.xi().unwrap() - 4.0).abs() < 1e-8);

        let pe = fit_correlator(
            &series(&x, |d| 0.2 * d.powf(-0.25) * (-d / 13.2).exp()),
            Model::PowerTimesExponential,
            &opts,
        )
        .unwrap();
        assert!((pe.scaling_dim.unwrap() - 0.125).abs() < 1e-9);
        assert!((pe.xi().unwrap() - 13.2).abs() < 1e-6);

        let t = 0.07;
        let cft = |d: f64| 0.3 * (t / (std::f64::consts::PI * t * d).sinh()).powf(0.25);
        let c = fit_correlator(&series(&x, cft), Model::FiniteTCft, &opts).unwrap();
        assert!((c.scaling_dim.unwrap() - 0.125).abs() < 1e-6, "{:?}", c.scaling_dim);
        assert!((c.temperature().unwrap() - t).abs() < 1e-6);
        assert!((c.amplitude() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn cft_small_temperature_matches_power() {
        let x = xs();
        let opts = FitOptions::default();
        let data = series(&x, |d| 0.2 * d.powf(-0.25));
        let p = fit_correlator(&data, Model::Power, &opts).unwrap();
        let c = fit_correlator(&data, Model::FiniteTCft, &opts).unwrap();
        assert!((c.scaling_dim.unwrap() - p.scaling_dim.unwrap()).abs() < 1e-6);
        assert!(c.temperature().unwrap() < 1e-4);
    }

    #[test]
    fn negative_values_fall_back_to_direct() {
        let x = xs();
        let mut s = series(&x, |d| 0.2 * d.powf(-0.25) * (-d / 6.0).exp());
        let opts = FitOptions::default();
        let clean = fit_correlator(&s, Model::PowerTimesExponential, &opts).unwrap();
        s.values[15] = -1e-4;
        let f = fit_correlator(&s, Model::PowerTimesExponential, &opts).unwrap();
        assert!(f.fell_back);
        assert_eq!(f.space, Space::Direct);
        assert!((f.scaling_dim.unwrap() - clean.scaling_dim.unwrap()).abs() < 0.05);
    }

    #[test]
    fn zero_data_is_degenerate() {
        let s = series(&xs(), |_| 0.0);
        let err = fit_correlator(&s, Model::PowerTimesExponential, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)), "{err}");
    }

    #[test]
    fn too_few_points_is_degenerate() {
        let s = series(&[2.0, 3.0, 4.0], |d| d.powf(-0.3));
        let err = fit_correlator(&s, Model::PowerTimesExponential, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)));
    }

    #[test]
    fn fit_range_defaults() {
        let mut s = series(&[1.0, 1.5, 2.0, 3.0, 4.0], |d| d);
        s.counts = vec![10, 10, 10, 10, 3];
        let r = FitRange::default().apply(&s);
        assert_eq!(r.distances, vec![1.5, 2.0, 3.0]);
    }

    #[test]
    fn joint_fit_recovers_shared_exponent() {
        let x = xs();
        let a = series(&x, |d| 0.2 * d.powf(-0.25) * (-d / 8.0).exp());
        let b = series(&x, |d| 0.5 * d.powf(-0.25) * (-d / 20.0).exp());
        let j = joint_fit(&[a, b], Model::PowerTimesExponential, &FitOptions::default()).unwrap();
        assert!((j.scaling_dim.unwrap() - 0.125).abs() < 1e-9);
        assert!((j.series[0].xi.unwrap() - 8.0).abs() < 1e-6);
        assert!((j.series[1].xi.unwrap() - 20.0).abs() < 1e-6);
        assert!(!j.incompatibility.unwrap().flagged);
    }

    #[test]
    fn joint_fit_flags_incompatible_exponents() {
        let x = xs();
        let a = series(&x, |d| 0.2 * d.powf(-0.25) * (-d / 8.0).exp());
        let b = series(&x, |d| 0.2 * d.powf(-1.0) * (-d / 8.0).exp());
        let j = joint_fit(&[a, b], Model::PowerTimesExponential, &FitOptions::default()).unwrap();
        assert!(j.incompatibility.unwrap().flagged);
    }

    #[test]
    fn summary_statistics() {
        let v: Vec<f64> = (0..11).map(|k| k as f64).collect();
        let s = summarize(&v, 0, 0.5);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.median, 5.0);
        assert!((s.p84 - 8.4).abs() < 1e-12);
        assert!(s.skewness.abs() < 1e-12);
        assert!(!s.asymmetric);
    }

    struct Logistic;

    impl KzSimulator for Logistic {
        fn sweep(&self, start: f64, end: f64, rate: f64, samples: &[f64]) -> Result<Vec<f64>> {
            // A lag proportional to the rate in the sweep direction.
            let lag = 0.05 * rate * (end - start).signum();
            Ok(samples.iter().map(|d| 1.0 / (1.0 + (-(d - 1.0 - lag) / 0.2f64).exp())).collect())
        }
    }

    #[test]
    fn rate_scan_orders_and_diagnoses() {
        let cfg = KzScanConfig {
            delta_start: -1.0,
            delta_end: 3.0,
            backward: true,
            plateau_tolerance: 0.05,
            ..Default::default()
        };
        let scan = kz_rate_scan(&Logistic, &[0.5, 4.0, 1.0, 2.0], &cfg).unwrap();
        let rates: Vec<f64> = scan.forward.iter().map(|p| p.rate).collect();
        assert_eq!(rates, vec![4.0, 2.0, 1.0, 0.5]);
        assert!(scan.forward_monotone);
        assert_eq!(scan.backward_monotone, Some(true));
        assert!(scan.plateau.unwrap().reached);
        let single = kz_rate_scan(&Logistic, &[1.0], &cfg).unwrap();
        assert_eq!(single.forward.len(), 1);
        assert!(single.plateau.is_none());
    }
}
