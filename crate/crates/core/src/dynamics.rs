//! Ramp synthesis and time evolution.
//!
//! Detuning schedules are piecewise linear in time between knots. Evolution
//! uses a fourth-order commutator-free Magnus integrator (two Krylov
//! exponentials per step) under step-doubling error control, with steps never
//! straddling a knot. The same stepper drives closed evolution and
//! the non-Hermitian effective Hamiltonian of the jump unraveling.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hamiltonian::{dense, Hamiltonian, OperatorCoefs, StateVector};
use crate::linalg::{cnorm, krylov_expm};
use crate::spectrum::GapProfile;
use crate::{Error, Result};

type C = Complex64;
const ZERO: C = C { re: 0.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampProfile {
    pub times: Vec<f64>,
    pub deltas: Vec<f64>,
    pub omegas: Vec<f64>,
    /// γ = E_g²/Δ̇ recorded by the synthesis, where it is known.
    pub gamma_diagnostic: Option<Vec<f64>>,
}

impl RampProfile {
    pub fn new(times: Vec<f64>, deltas: Vec<f64>, omegas: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != deltas.len() || times.len() != omegas.len() {
            return Err(Error::domain("ramp needs matching, non-empty time/delta/omega columns"));
        }
        if times[0] != 0.0 {
            return Err(Error::domain("ramp must start at t = 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("ramp times must be strictly increasing"));
        }
        if deltas.iter().chain(&omegas).any(|x| !x.is_finite()) {
            return Err(Error::domain("ramp values must be finite"));
        }
        Ok(Self {
            times,
            deltas,
            omegas,
            gamma_diagnostic: None,
        })
    }

    pub fn total_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn interp(&self, values: &[f64], t: f64) -> f64 {
        let ts = &self.times;
        if ts.len() == 1 || t <= ts[0] {
            return values[0];
        }
        if t >= ts[ts.len() - 1] {
            return values[values.len() - 1];
        }
        let k = ts.partition_point(|&x| x <= t);
        let f = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
        values[k - 1] + f * (values[k] - values[k - 1])
    }

    pub fn delta_at(&self, t: f64) -> f64 {
        self.interp(&self.deltas, t)
    }

    pub fn omega_at(&self, t: f64) -> f64 {
        self.interp(&self.omegas, t)
    }

    /// Prepend a segment in which Ω rises linearly from zero at the initial
    /// detuning.
    pub fn with_omega_turn_on(&self, duration: f64) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::domain("turn-on duration must be positive"));
        }
        let mut times = vec![0.0];
        let mut deltas = vec![self.deltas[0]];
        let mut omegas = vec![0.0];
        times.extend(self.times.iter().map(|t| t + duration));
        deltas.extend(&self.deltas);
        omegas.extend(&self.omegas);
        let mut r = Self::new(times, deltas, omegas)?;
        r.gamma_diagnostic = self.gamma_diagnostic.as_ref().map(|g| {
            let mut v = vec![f64::NAN];
            v.extend(g);
            v
        });
        Ok(r)
    }

    /// The same schedule played backwards in time.
    pub fn reversed(&self) -> Self {
        let t = self.total_time();
        Self {
            times: self.times.iter().rev().map(|x| t - x).collect(),
            deltas: self.deltas.iter().rev().cloned().collect(),
            omegas: self.omegas.iter().rev().cloned().collect(),
            gamma_diagnostic: self.gamma_diagnostic.as_ref().map(|g| g.iter().rev().cloned().collect()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,delta,omega\n");
        for k in 0..self.len() {
            let _ = writeln!(s, "{},{},{}", self.times[k], self.deltas[k], self.omegas[k]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty ramp file".into()))?;
        if header.trim() != "t,delta,omega" {
            return Err(Error::Parse(format!("unexpected ramp header {header:?}")));
        }
        let (mut t, mut d, mut o) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("ramp row {}: {e}", i + 1)))?;
            if cols.len() != 3 {
                return Err(Error::Parse(format!("ramp row {} has {} columns", i + 1, cols.len())));
            }
            t.push(cols[0]);
            d.push(cols[1]);
            o.push(cols[2]);
        }
        Self::new(t, d, o)
    }
}

/// Local-adiabatic ramp on an equally spaced detuning grid: interval k gets
/// time ∝ 1/E_g²(Δ_k), so E_g²/Δ̇ is the same on every interval.
pub fn lila_ramp_discrete(
    profile: &GapProfile,
    delta0: f64,
    delta_target: f64,
    total_time: f64,
    n_points: usize,
) -> Result<RampProfile> {
    if n_points < 2 {
        return Err(Error::domain("LILA ramp needs at least two points"));
    }
    if !(total_time > 0.0) {
        return Err(Error::domain("ramp duration must be positive"));
    }
    if delta_target == delta0 {
        return Err(Error::domain("LILA ramp needs distinct endpoints"));
    }
    let omega = profile.spec_template.omega;
    let d_delta = (delta_target - delta0) / (n_points - 1) as f64;
    let deltas: Vec<f64> = (0..n_points)
        .map(|k| if k + 1 == n_points { delta_target } else { delta0 + k as f64 * d_delta })
        .collect();
    let gaps: Vec<f64> = deltas.iter().map(|&d| profile.gap_at(d)).collect::<Result<_>>()?;
    if let Some(g) = gaps.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::domain(format!("LILA ramp needs positive gaps, found {g}")));
    }
    let weights: Vec<f64> = gaps[..n_points - 1].iter().map(|g| 1.0 / (g * g)).collect();
    let total_w: f64 = weights.iter().sum();
    let mut times = Vec::with_capacity(n_points);
    times.push(0.0);
    let mut acc = 0.0;
    for w in &weights {
        acc += total_time * w / total_w;
        times.push(acc);
    }
    times[n_points - 1] = total_time;
    let gamma = total_time / (d_delta.abs() * total_w);
    let mut ramp = RampProfile::new(times, deltas, vec![omega; n_points])?;
    ramp.gamma_diagnostic = Some(vec![gamma; n_points]);
    Ok(ramp)
}

/// Closed-form schedule for a gap that falls linearly from `e0` at `delta0`
/// to `ec` at `delta_c`.
pub fn lila_ramp_analytic(
    e0: f64,
    ec: f64,
    delta0: f64,
    delta_c: f64,
    total_time: f64,
    n_points: usize,
    omega: f64,
) -> Result<RampProfile> {
    if !(e0 > 0.0) || !(ec > 0.0) {
        return Err(Error::domain("analytic LILA needs positive gaps"));
    }
    if !(total_time > 0.0) || n_points < 2 {
        return Err(Error::domain("analytic LILA needs T > 0 and n_points >= 2"));
    }
    let t_total = total_time;
    let times: Vec<f64> = (0..n_points)
        .map(|k| if k + 1 == n_points { t_total } else { t_total * k as f64 / (n_points - 1) as f64 })
        .collect();
    let deltas: Vec<f64> = times
        .iter()
        .map(|&t| (e0 * delta_c * t + ec * delta0 * (t_total - t)) / (e0 * t + ec * (t_total - t)))
        .collect();
    let mut ramp = RampProfile::new(times, deltas, vec![omega; n_points])?;
    let n = ramp.len();
    ramp.deltas[0] = delta0;
    ramp.deltas[n - 1] = delta_c;
    let gamma = e0 * ec * t_total / (delta_c - delta0);
    ramp.gamma_diagnostic = Some(vec![gamma; n_points]);
    Ok(ramp)
}

/// Constant-rate sweep; `rate` in rad/μs².
pub fn linear_ramp(delta0: f64, delta1: f64, rate: f64, omega: f64) -> Result<RampProfile> {
    if !(rate > 0.0) {
        return Err(Error::domain("sweep rate must be positive"));
    }
    let t = (delta1 - delta0).abs() / rate;
    if t == 0.0 {
        return RampProfile::new(vec![0.0], vec![delta0], vec![omega]);
    }
    RampProfile::new(vec![0.0, t], vec![delta0, delta1], vec![omega, omega])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdiabaticityReport {
    pub times: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Knots dropped because Δ did not move around them.
    pub excluded: Vec<usize>,
    pub min_gamma: f64,
    pub min_time: f64,
}

impl AdiabaticityReport {
    pub fn spread(&self) -> f64 {
        let max = self.gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max / self.min_gamma
    }
}

/// γ(t_k) = E_g²/Δ̇ at each knot. The rate is a central difference over the
/// neighbouring knots and E_g² is taken as the product of the gaps at those
/// neighbours, which makes the estimate exact for a gap linear in Δ.
pub fn adiabaticity_check(ramp: &RampProfile, profile: &GapProfile) -> Result<AdiabaticityReport> {
    let n = ramp.len();
    if n < 2 {
        return Err(Error::domain("adiabaticity check needs at least two knots"));
    }
    let gaps: Vec<f64> = ramp.deltas.iter().map(|&d| profile.gap_at(d)).collect::<Result<_>>()?;
    let mut times = Vec::new();
    let mut gammas = Vec::new();
    let mut excluded = Vec::new();
    for k in 0..n {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let dd = (ramp.deltas[b] - ramp.deltas[a]).abs();
        let dt = ramp.times[b] - ramp.times[a];
        if dd <= 1e-14 * (1.0 + ramp.deltas[a].abs()) {
            excluded.push(k);
            continue;
        }
        times.push(ramp.times[k]);
        gammas.push(gaps[a] * gaps[b] * dt / dd);
    }
    if !excluded.is_empty() {
        log::warn!("adiabaticity check: {} knot(s) with zero sweep rate excluded", excluded.len());
    }
    if gammas.is_empty() {
        return Err(Error::domain("ramp never changes the detuning"));
    }
    let (imin, &min_gamma) = gammas
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    Ok(AdiabaticityReport {
        min_time: times[imin],
        times,
        gammas,
        excluded,
        min_gamma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    /// Target global error in the state (max amplitude deviation).
    pub tol: f64,
    pub max_dt: f64,
    pub min_dt: f64,
    pub krylov_dim: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_dt: 0.05,
            min_dt: 1e-10,
            krylov_dim: 30,
        }
    }
}

/// Rates and couplings behind the per-site jump operators. Rates in μs⁻¹,
/// couplings in rad/μs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpParams {
    pub gamma_decay: f64,
    pub omega_blue: f64,
    pub omega_ir: f64,
    pub delta_int: f64,
    pub gamma_e: f64,
}

impl JumpParams {
    /// Cs 54S parameters of the reference experiment.
    pub fn reference() -> Self {
        use crate::units::mhz;
        Self {
            gamma_decay: 1.0 / 71.44,
            omega_blue: mhz(80.04),
            omega_ir: mhz(42.3),
            delta_int: mhz(1058.0),
            gamma_e: mhz(1.23),
        }
    }

    pub fn from_lifetime(lifetime: f64, omega_blue: f64, omega_ir: f64, delta_int: f64, gamma_e: f64) -> Result<Self> {
        if !(lifetime > 0.0) {
            return Err(Error::domain("lifetime must be positive"));
        }
        Ok(Self {
            gamma_decay: 1.0 / lifetime,
            omega_blue,
            omega_ir,
            delta_int,
            gamma_e,
        })
    }

    /// Multiply both dissipative rates, leaving the couplings untouched.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            gamma_decay: self.gamma_decay * factor,
            gamma_e: self.gamma_e * factor,
            ..*self
        }
    }

    pub fn none() -> Self {
        Self {
            gamma_decay: 0.0,
            gamma_e: 0.0,
            ..Self::reference()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpOperatorSet {
    pub gamma_decay: f64,
    /// κ = γ_e/(4δ²); the scattering operator is √κ(Ω_b|g⟩⟨g| + Ω_IR|g⟩⟨r|).
    pub scatter_coef: f64,
    pub omega_blue: f64,
    pub omega_ir: f64,
    pub gamma_scatt: f64,
    /// Ω_b·Ω_IR/(2δ).
    pub two_photon_omega: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpChannel {
    Decay,
    Scatter,
}

pub fn make_jump_set(params: &JumpParams) -> Result<JumpOperatorSet> {
    let p = params;
    if !(p.delta_int.abs() > 0.0) {
        return Err(Error::domain("intermediate-state detuning must be nonzero"));
    }
    if p.gamma_decay < 0.0 || p.gamma_e < 0.0 {
        return Err(Error::domain("decay rates must be non-negative"));
    }
    let kappa = p.gamma_e / (4.0 * p.delta_int * p.delta_int);
    Ok(JumpOperatorSet {
        gamma_decay: p.gamma_decay,
        scatter_coef: kappa,
        omega_blue: p.omega_blue,
        omega_ir: p.omega_ir,
        gamma_scatt: kappa * (p.omega_blue.powi(2) + p.omega_ir.powi(2)),
        two_photon_omega: p.omega_blue * p.omega_ir / (2.0 * p.delta_int),
    })
}

impl JumpOperatorSet {
    pub fn is_empty(&self) -> bool {
        self.gamma_decay == 0.0 && self.gamma_scatt == 0.0
    }

    /// Local operators on (g, r), one per channel that has a nonzero rate.
    pub fn local_operators(&self) -> Vec<(JumpChannel, [[C; 2]; 2])> {
        let mut out = Vec::new();
        if self.gamma_decay > 0.0 {
            let a = C::new(self.gamma_decay.sqrt(), 0.0);
            out.push((JumpChannel::Decay, [[ZERO, a], [ZERO, ZERO]]));
        }
        if self.gamma_scatt > 0.0 {
            let k = self.scatter_coef.sqrt();
            out.push((
                JumpChannel::Scatter,
                [[C::new(k * self.omega_blue, 0.0), C::new(k * self.omega_ir, 0.0)], [ZERO, ZERO]],
            ));
        }
        out
    }

    /// Coefficients of H_eff = H − (i/2)Σ_j c_j†c_j in the generic operator
    /// form. Summed over sites, the scattering term contributes
    /// κ[Ω_b²(N − n) + Ω_bΩ_IR Σσˣ + Ω_IR² n] and decay contributes γ n.
    fn effective_coefs(&self, n_sites: usize, omega: f64, delta: f64) -> OperatorCoefs<C> {
        let k = self.scatter_coef;
        let (ob, oi) = (self.omega_blue, self.omega_ir);
        OperatorCoefs {
            constant: C::new(0.0, -0.5 * k * ob * ob * n_sites as f64),
            per_excitation: C::new(-delta, -0.5 * (self.gamma_decay + k * oi * oi - k * ob * ob)),
            flip: C::new(0.5 * omega, -0.5 * k * ob * oi),
        }
    }
}

#[derive(Clone, Copy)]
enum Generator<'a> {
    Closed,
    Open(&'a JumpOperatorSet),
}

struct Stepper<'a> {
    h: &'a Hamiltonian,
    ramp: &'a RampProfile,
    generator: Generator<'a>,
    ctl: StepControl,
    /// Length of the whole evolution, used to apportion the error budget.
    horizon: f64,
}

impl<'a> Stepper<'a> {
    fn coefs(&self, t: f64) -> OperatorCoefs<C> {
        let omega = self.ramp.omega_at(t);
        let delta = self.ramp.delta_at(t);
        match self.generator {
            Generator::Closed => OperatorCoefs {
                constant: ZERO,
                per_excitation: C::new(-delta, 0.0),
                flip: C::new(0.5 * omega, 0.0),
            },
            Generator::Open(j) => j.effective_coefs(self.h.n_sites(), omega, delta),
        }
    }

    /// One fourth-order commutator-free Magnus step: two exponentials of
    /// mixtures of H at the Gauss nodes. Each mixture keeps the interaction
    /// weight at one, so the exponent is −i(dt/2)·H̃.
    fn single(&self, t: f64, dt: f64, psi: &[C]) -> Result<Vec<C>> {
        let r = 3f64.sqrt() / 6.0;
        let h1 = self.coefs(t + (0.5 - r) * dt);
        let h2 = self.coefs(t + (0.5 + r) * dt);
        let (w_lo, w_hi) = (0.5 - 2.0 * r, 0.5 + 2.0 * r);
        let mix = |a: f64, b: f64| OperatorCoefs {
            constant: h1.constant * a + h2.constant * b,
            per_excitation: h1.per_excitation * a + h2.per_excitation * b,
            flip: h1.flip * a + h2.flip * b,
        };
        let ktol = (1e-2 * self.ctl.tol * dt / self.horizon.max(1e-300)).max(1e-15);
        let tau = C::new(0.0, -0.5 * dt);
        let mut x = psi.to_vec();
        for coefs in [mix(w_hi, w_lo), mix(w_lo, w_hi)] {
            let apply = |u: &[C], y: &mut [C]| self.h.apply_raw(coefs, u, y);
            x = krylov_expm(apply, &x, tau, ktol, self.ctl.krylov_dim)?.vector;
        }
        Ok(x)
    }

    /// Two half steps, with the deviation from one full step as error.
    fn doubled(&self, t: f64, dt: f64, psi: &[C]) -> Result<(Vec<C>, f64)> {
        let full = self.single(t, dt, psi)?;
        let half = self.single(t, 0.5 * dt, psi)?;
        let two = self.single(t + 0.5 * dt, 0.5 * dt, &half)?;
        let err = full
            .iter()
            .zip(&two)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        Ok((two, err))
    }

    /// Adaptive integration from `t0` to `t1` (no knot inside). With a
    /// threshold, stops at the first accepted step whose squared norm drops to
    /// or below it and returns the state at the start of that step.
    fn advance(&self, t0: f64, t1: f64, psi: Vec<C>, dt: &mut f64, threshold: Option<f64>) -> Result<Advance> {
        let mut t = t0;
        let mut psi = psi;
        let span = self.horizon.max(t1 - t0).max(1e-300);
        while t1 - t > 1e-13 * t1.abs().max(1.0) {
            let h = dt.min(t1 - t).min(self.ctl.max_dt);
            let budget = self.ctl.tol * h / span;
            let (next, err) = self.doubled(t, h, &psi)?;
            let scale = cnorm(&psi).max(1e-300);
            let rel = err / scale;
            if rel > budget && h > self.ctl.min_dt {
                *dt = (h * (0.9 * (budget / rel).powf(0.25)).clamp(0.2, 0.9)).max(self.ctl.min_dt);
                continue;
            }
            if rel > budget {
                return Err(Error::Integration {
                    time: t,
                    achieved: rel * span / h,
                    requested: self.ctl.tol,
                });
            }
            if let Some(r) = threshold {
                let n2: f64 = next.iter().map(|a| a.norm_sqr()).sum();
                if n2 <= r {
                    return Ok(Advance::Crossed { t, dt: h, psi });
                }
            }
            t += h;
            psi = next;
            let grow = if rel > 0.0 { (0.9 * (budget / rel).powf(0.25)).clamp(1.0, 2.0) } else { 2.0 };
            *dt = (h * grow).min(self.ctl.max_dt);
        }
        Ok(Advance::Reached(psi))
    }

    /// Time within (0, dt] at which ‖ψ‖² falls to `r`. ln‖ψ‖² is close to
    /// linear over one step, so Illinois regula falsi converges in a handful
    /// of evaluations.
    fn locate(&self, t: f64, dt: f64, psi: &[C], r: f64) -> Result<(f64, Vec<C>)> {
        let f = |x: &[C]| x.iter().map(|a| a.norm_sqr()).sum::<f64>().ln() - r.ln();
        let (mut lo, mut hi) = (0.0, dt);
        let mut f_lo = f(psi);
        let mut best = self.single(t, hi, psi)?;
        let mut f_hi = f(&best);
        let mut side = 0i8;
        for _ in 0..100 {
            if hi - lo <= 1e-12 * (t + dt).max(1.0) || f_hi.abs() <= 1e-12 {
                break;
            }
            let mut mid = hi - f_hi * (hi - lo) / (f_hi - f_lo);
            if !(mid > lo && mid < hi) {
                mid = 0.5 * (lo + hi);
            }
            let cand = self.single(t, mid, psi)?;
            let f_mid = f(&cand);
            if f_mid <= 0.0 {
                hi = mid;
                f_hi = f_mid;
                best = cand;
                if side == -1 {
                    f_lo *= 0.5;
                }
                side = -1;
            } else {
                lo = mid;
                f_lo = f_mid;
                if side == 1 {
                    f_hi *= 0.5;
                }
                side = 1;
            }
        }
        Ok((t + hi, best))
    }
}

enum Advance {
    Reached(Vec<C>),
    Crossed { t: f64, dt: f64, psi: Vec<C> },
}

fn segment_bounds(ramp: &RampProfile, checkpoints: &[f64]) -> Vec<f64> {
    let mut b: Vec<f64> = ramp.times.clone();
    b.extend(checkpoints.iter().filter(|&&c| c > 0.0 && c < ramp.total_time()));
    b.sort_by(f64::total_cmp);
    b.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs().max(1.0));
    b
}

fn check_start(h: &Hamiltonian, psi0: &StateVector) -> Result<()> {
    if !psi0.basis.same_as(h.basis()) {
        return Err(Error::Dimension {
            expected: h.dim(),
            found: psi0.dim(),
        });
    }
    if (psi0.norm_sqr() - 1.0).abs() > 1e-8 {
        return Err(Error::domain("initial state must be normalized"));
    }
    Ok(())
}

/// Solve i dψ/dt = H(Ω(t), Δ(t))ψ over the ramp. `h_template` supplies the
/// couplings and basis; its own drive is ignored.
pub fn evolve_unitary(h_template: &Hamiltonian, ramp: &RampProfile, psi0: &StateVector, ctl: &StepControl) -> Result<StateVector> {
    evolve_unitary_observed(h_template, ramp, psi0, ctl, &[], |_, _| {})
}

/// As [`evolve_unitary`], additionally handing the state to `observer` at
/// every checkpoint time (steps are aligned to land on them exactly).
pub fn evolve_unitary_observed(
    h_template: &Hamiltonian,
    ramp: &RampProfile,
    psi0: &StateVector,
    ctl: &StepControl,
    checkpoints: &[f64],
    mut observer: impl FnMut(f64, &StateVector),
) -> Result<StateVector> {
    check_start(h_template, psi0)?;
    let stepper = Stepper {
        h: h_template,
        ramp,
        generator: Generator::Closed,
        ctl: *ctl,
        horizon: ramp.total_time(),
    };
    let bounds = segment_bounds(ramp, checkpoints);
    let wants = |t: f64| checkpoints.iter().any(|&c| (c - t).abs() <= 1e-12 * t.abs().max(1.0));
    let mut psi = psi0.amps.clone();
    let mut dt = ctl.max_dt;
    if wants(0.0) {
        observer(0.0, &StateVector { amps: psi.clone(), basis: Arc::clone(&psi0.basis) });
    }
    for w in bounds.windows(2) {
        psi = match stepper.advance(w[0], w[1], psi, &mut dt, None)? {
            Advance::Reached(p) => p,
            Advance::Crossed { .. } => unreachable!("no threshold set"),
        };
        if wants(w[1]) {
            observer(w[1], &StateVector { amps: psi.clone(), basis: Arc::clone(&psi0.basis) });
        }
    }
    StateVector::new(psi, Arc::clone(&psi0.basis))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub site: usize,
    pub channel: JumpChannel,
}

#[derive(Clone, Debug)]
pub struct TrajectoryResult {
    pub final_state: StateVector,
    pub jump_log: Vec<JumpEvent>,
    pub seed: u64,
    pub stream: u64,
}

/// Per-trajectory generator: one ChaCha stream per trajectory index under a
/// shared master seed.
pub fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_threshold(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// c|ψ⟩ for a local operator on `site`.
fn apply_local(h: &Hamiltonian, local: &[[C; 2]; 2], site: usize, psi: &[C]) -> Vec<C> {
    let basis = h.basis();
    let mut out = vec![ZERO; psi.len()];
    for (k, &a) in psi.iter().enumerate() {
        if a == ZERO {
            continue;
        }
        let s = basis.state(k);
        let bc = ((s >> site) & 1) as usize;
        for br in 0..2usize {
            let m = local[br][bc];
            if m == ZERO {
                continue;
            }
            let target = (s & !(1 << site)) | ((br as u64) << site);
            if let Some(r) = basis.index_of(target) {
                out[r] += m * a;
            }
        }
    }
    out
}

/// One quantum trajectory by the waiting-time method: draw r, integrate
/// under H_eff until ‖ψ‖² = r, jump through a channel chosen with weight
/// ⟨c†c⟩, renormalize, repeat.
pub fn evolve_trajectory(
    h_template: &Hamiltonian,
    ramp: &RampProfile,
    jumps: &JumpOperatorSet,
    psi0: &StateVector,
    seed: u64,
    stream: u64,
    ctl: &StepControl,
) -> Result<TrajectoryResult> {
    check_start(h_template, psi0)?;
    if jumps.is_empty() {
        let final_state = evolve_unitary(h_template, ramp, psi0, ctl)?;
        return Ok(TrajectoryResult {
            final_state,
            jump_log: Vec::new(),
            seed,
            stream,
        });
    }
    let mut rng = trajectory_rng(seed, stream);
    let stepper = Stepper {
        h: h_template,
        ramp,
        generator: Generator::Open(jumps),
        ctl: *ctl,
        horizon: ramp.total_time(),
    };
    let locals = jumps.local_operators();
    let n = h_template.n_sites();
    let mut psi = psi0.amps.clone();
    let mut r = draw_threshold(&mut rng);
    let mut log = Vec::new();
    let mut dt = ctl.max_dt;
    let bounds = segment_bounds(ramp, &[]);
    for w in bounds.windows(2) {
        let mut t = w[0];
        loop {
            match stepper.advance(t, w[1], psi, &mut dt, Some(r))? {
                Advance::Reached(p) => {
                    psi = p;
                    break;
                }
                Advance::Crossed { t: ts, dt: h, psi: before } => {
                    let (tj, at_jump) = stepper.locate(ts, h, &before, r)?;
                    let candidates: Vec<(usize, JumpChannel, Vec<C>, f64)> = (0..n)
                        .flat_map(|site| locals.iter().map(move |(ch, op)| (site, *ch, op)))
                        .map(|(site, ch, op)| {
                            let v = apply_local(h_template, op, site, &at_jump);
                            let w: f64 = v.iter().map(|a| a.norm_sqr()).sum();
                            (site, ch, v, w)
                        })
                        .collect();
                    let total: f64 = candidates.iter().map(|c| c.3).sum();
                    if !(total > 0.0) {
                        return Err(Error::Integration {
                            time: tj,
                            achieved: total,
                            requested: 0.0,
                        });
                    }
                    let pick = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut chosen = candidates.len() - 1;
                    for (i, c) in candidates.iter().enumerate() {
                        acc += c.3;
                        if pick < acc {
                            chosen = i;
                            break;
                        }
                    }
                    let (site, channel, v, w) = candidates.into_iter().nth(chosen).unwrap();
                    let inv = 1.0 / w.sqrt();
                    psi = v.into_iter().map(|a| a * inv).collect();
                    log.push(JumpEvent { time: tj, site, channel });
                    r = draw_threshold(&mut rng);
                    t = tj;
                }
            }
        }
    }
    let mut final_state = StateVector::new(psi, Arc::clone(&psi0.basis))?;
    final_state.normalize()?;
    Ok(TrajectoryResult {
        final_state,
        jump_log: log,
        seed,
        stream,
    })
}

/// `m` independent trajectories (streams 0..m under `seed`), evaluated in
/// parallel and returned in stream order.
pub fn run_ensemble(
    h_template: &Hamiltonian,
    ramp: &RampProfile,
    jumps: &JumpOperatorSet,
    psi0: &StateVector,
    m: usize,
    seed: u64,
    ctl: &StepControl,
) -> Result<Vec<TrajectoryResult>> {
    if m == 0 {
        return Err(Error::domain("ensemble needs at least one trajectory"));
    }
    (0..m as u64)
        .into_par_iter()
        .map(|k| evolve_trajectory(h_template, ramp, jumps, psi0, seed, k, ctl))
        .collect()
}

pub const DEFAULT_TRAJECTORIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub trajectories: usize,
    pub seed: u64,
    pub density_mean: Vec<f64>,
    pub density_stderr: Vec<f64>,
    pub mean_jumps: f64,
    pub jumps_by_channel: std::collections::BTreeMap<String, usize>,
    pub trajectories_with_jumps: usize,
}

pub fn summarize_ensemble(results: &[TrajectoryResult]) -> Result<EnsembleSummary> {
    let m = results.len();
    if m == 0 {
        return Err(Error::domain("empty ensemble"));
    }
    let n = results[0].final_state.n_sites();
    let dens: Vec<Vec<f64>> = results.iter().map(|r| r.final_state.site_densities()).collect();
    let mut mean = vec![0.0; n];
    for d in &dens {
        for i in 0..n {
            mean[i] += d[i] / m as f64;
        }
    }
    let stderr = (0..n)
        .map(|i| {
            if m < 2 {
                return f64::NAN;
            }
            let var = dens.iter().map(|d| (d[i] - mean[i]).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        })
        .collect();
    let mut by_channel = std::collections::BTreeMap::new();
    for r in results {
        for j in &r.jump_log {
            let key = match j.channel {
                JumpChannel::Decay => "decay",
                JumpChannel::Scatter => "scatter",
            };
            *by_channel.entry(key.to_string()).or_insert(0) += 1;
        }
    }
    let total_jumps: usize = results.iter().map(|r| r.jump_log.len()).sum();
    Ok(EnsembleSummary {
        trajectories: m,
        seed: results[0].seed,
        density_mean: mean,
        density_stderr: stderr,
        mean_jumps: total_jumps as f64 / m as f64,
        jumps_by_channel: by_channel,
        trajectories_with_jumps: results.iter().filter(|r| !r.jump_log.is_empty()).count(),
    })
}

/// Largest system the dense master-equation integrator accepts.
pub const LINDBLAD_MAX_SITES: usize = 6;

/// Dense integration of dρ/dt = −i[H,ρ] + Σ_j (c_j ρ c_j† − ½{c_j†c_j, ρ})
/// with classical RK4 on a step far below the inverse operator norm.
pub fn lindblad_exact(
    h_template: &Hamiltonian,
    ramp: &RampProfile,
    jumps: &JumpOperatorSet,
    rho0: &DMatrix<C>,
) -> Result<DMatrix<C>> {
    let n = h_template.n_sites();
    if n > LINDBLAD_MAX_SITES {
        return Err(Error::Capacity {
            what: "dense master equation sites".into(),
            limit: LINDBLAD_MAX_SITES,
            requested: n,
        });
    }
    let dim = h_template.dim();
    if rho0.nrows() != dim || rho0.ncols() != dim {
        return Err(Error::Dimension {
            expected: dim,
            found: rho0.nrows(),
        });
    }
    let tr = rho0.trace();
    if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
        return Err(Error::domain("initial density matrix must have unit trace"));
    }
    let basis = h_template.basis();
    let spec = h_template.spec();
    let flip = dense::hamiltonian_complex(&spec.with_drive(1.0, 0.0), basis)
        - dense::hamiltonian_complex(&spec.with_drive(0.0, 0.0), basis);
    let interaction = dense::hamiltonian_complex(&spec.with_drive(0.0, 0.0), basis);
    let number = -(dense::hamiltonian_complex(&spec.with_drive(0.0, 1.0), basis) - &interaction);
    let ops: Vec<DMatrix<C>> = (0..n)
        .flat_map(|site| {
            jumps
                .local_operators()
                .into_iter()
                .map(move |(_, local)| dense::site_operator(basis, site, local))
        })
        .collect();
    let ops_dag: Vec<DMatrix<C>> = ops.iter().map(|c| c.adjoint()).collect();
    let decay_sum: DMatrix<C> = ops
        .iter()
        .zip(&ops_dag)
        .fold(DMatrix::zeros(dim, dim), |acc, (c, cd)| acc + cd * c);
    let i = C::new(0.0, 1.0);
    let h_at = |t: f64| -> DMatrix<C> {
        let om = ramp.omega_at(t);
        let de = ramp.delta_at(t);
        &interaction + &flip * C::new(om, 0.0) + &number * C::new(-de, 0.0)
    };
    let rhs = |t: f64, rho: &DMatrix<C>| -> DMatrix<C> {
        let h = h_at(t);
        // −iHρ − ½Γρ + h.c.-type terms, with K = H − (i/2)Γ
        let k = &h - &decay_sum * C::new(0.0, 0.5);
        let kr = &k * rho;
        let mut out = (&kr * (-i)) + (kr.adjoint() * i);
        for (c, cd) in ops.iter().zip(&ops_dag) {
            out += c * rho * cd;
        }
        out
    };
    let norm_est = h_at(0.0).norm().max(h_at(ramp.total_time()).norm()) + decay_sum.norm();
    let dt_max = 0.02 / norm_est.max(1e-12);
    let mut rho = rho0.clone();
    for w in ramp.times.windows(2) {
        let len = w[1] - w[0];
        let steps = (len / dt_max).ceil().max(1.0) as usize;
        let h = len / steps as f64;
        for s in 0..steps {
            let t = w[0] + s as f64 * h;
            let k1 = rhs(t, &rho);
            let k2 = rhs(t + 0.5 * h, &(&rho + &k1 * C::new(0.5 * h, 0.0)));
            let k3 = rhs(t + 0.5 * h, &(&rho + &k2 * C::new(0.5 * h, 0.0)));
            let k4 = rhs(t + h, &(&rho + &k3 * C::new(h, 0.0)));
            rho += (k1 + k2 * C::new(2.0, 0.0) + k3 * C::new(2.0, 0.0) + k4) * C::new(h / 6.0, 0.0);
        }
    }
    Ok(rho)
}

/// ⟨n_i⟩ from a density matrix in the Hamiltonian's basis.
pub fn density_matrix_occupations(h: &Hamiltonian, rho: &DMatrix<C>) -> Vec<f64> {
    let basis = h.basis();
    (0..h.n_sites())
        .map(|site| (0..h.dim()).map(|k| rho[(k, k)].re * basis.occupation(k, site)).sum())
        .collect()
}

/// |ψ⟩⟨ψ|
pub fn pure_density(psi: &StateVector) -> DMatrix<C> {
    let v = nalgebra::DVector::from_column_slice(&psi.amps);
    &v * v.adjoint()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::HamiltonianSpec;
    use crate::lattice::build_ring;

    fn single(omega: f64) -> Hamiltonian {
        Hamiltonian::full(HamiltonianSpec::from_positions(&[[0.0, 0.0]], omega, 0.0, 1.0, None, None).unwrap()).unwrap()
    }

    fn flat_profile(gap: f64) -> GapProfile {
        let spec = HamiltonianSpec::from_positions(&[[0.0, 0.0]], 1.0, 0.0, 1.0, None, None).unwrap();
        GapProfile {
            delta_grid: vec![-10.0, 10.0],
            gaps: vec![gap, gap],
            ground_energies: vec![0.0, 0.0],
            degenerate: vec![false, false],
            sector_order: 1,
            spec_template: spec,
        }
    }

    #[test]
    fn linear_ramp_durations() {
        use crate::units::mhz;
        let r = linear_ramp(-mhz(10.0), mhz(10.0), mhz(30.0), 1.0).unwrap();
        assert!((r.total_time() - 2.0 / 3.0).abs() < 1e-12);
        let r2 = linear_ramp(-mhz(10.0), mhz(10.0), mhz(60.0), 1.0).unwrap();
        assert!((r2.total_time() - r.total_time() / 2.0).abs() < 1e-12);
        let flat = linear_ramp(1.0, 1.0, 2.0, 1.0).unwrap();
        assert_eq!(flat.total_time(), 0.0);
        assert!(linear_ramp(0.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn constant_gap_gives_linear_lila() {
        let r = lila_ramp_discrete(&flat_profile(2.0), -1.0, 1.0, 3.0, 11).unwrap();
        for k in 0..11 {
            assert!((r.times[k] - 0.3 * k as f64).abs() < 1e-12);
        }
        assert_eq!(r.deltas[0], -1.0);
        assert_eq!(r.deltas[10], 1.0);
        assert_eq!(r.total_time(), 3.0);
    }

    #[test]
    fn two_point_lila_weights() {
        let mut p = flat_profile(1.0);
        p.delta_grid = vec![0.0, 1.0];
        p.gaps = vec![1.0, 2.0];
        let r = lila_ramp_discrete(&p, 0.0, 1.0, 5.0, 2).unwrap();
        assert_eq!(r.times, vec![0.0, 5.0]);
        let r = lila_ramp_discrete(&p, 0.0, 1.0, 5.0, 3).unwrap();
        // weights 1/1 and 1/1.5²
        let w = [1.0, 1.0 / 2.25];
        assert!((r.times[1] - 5.0 * w[0] / (w[0] + w[1])).abs() < 1e-12);
    }

    #[test]
    fn analytic_lila_values() {
        let r = lila_ramp_analytic(2.0, 1.0, -1.0, 1.0, 1.0, 3, 1.0).unwrap();
        assert!((r.deltas[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.deltas[0], -1.0);
        assert_eq!(r.deltas[2], 1.0);
        let lin = lila_ramp_analytic(1.5, 1.5, -2.0, 3.0, 4.0, 17, 1.0).unwrap();
        for k in 0..17 {
            let want = -2.0 + 5.0 * lin.times[k] / 4.0;
            assert!((lin.deltas[k] - want).abs() < 1e-12);
        }
        assert!(lila_ramp_analytic(0.0, 1.0, 0.0, 1.0, 1.0, 3, 1.0).is_err());
    }

    #[test]
    fn analytic_lila_has_constant_gamma() {
        // gap linear in Δ from E0 at Δ0 to Ec at Δc
        let (e0, ec, d0, dc) = (2.0, 0.5, -1.0, 1.5);
        let mut p = flat_profile(1.0);
        p.delta_grid = vec![d0, dc];
        p.gaps = vec![e0, ec];
        let r = lila_ramp_analytic(e0, ec, d0, dc, 3.0, 101, 1.0).unwrap();
        let rep = adiabaticity_check(&r, &p).unwrap();
        let want = e0 * ec * 3.0 / (dc - d0);
        for g in &rep.gammas {
            assert!((g - want).abs() < 1e-9 * want);
        }
    }

    #[test]
    fn zero_rate_knots_are_excluded() {
        let r = RampProfile::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0, 1.0], vec![1.0; 4]).unwrap();
        let rep = adiabaticity_check(&r, &flat_profile(1.0)).unwrap();
        assert_eq!(rep.excluded, vec![0, 1]);
    }

    #[test]
    fn ramp_csv_round_trip() {
        let r = linear_ramp(-1.0, 2.0, 0.7, 1.3).unwrap().with_omega_turn_on(0.2).unwrap();
        let q = RampProfile::from_csv(&r.to_csv()).unwrap();
        assert_eq!(r.times, q.times);
        assert_eq!(r.deltas, q.deltas);
        assert_eq!(r.omegas, q.omegas);
        assert_eq!(q.omega_at(0.1), 0.5 * 1.3);
    }

    #[test]
    fn pi_pulse() {
        let omega = 2.0;
        let h = single(omega);
        let t = std::f64::consts::PI / omega;
        let ramp = RampProfile::new(vec![0.0, t], vec![0.0, 0.0], vec![omega, omega]).unwrap();
        let psi = StateVector::all_ground(Arc::clone(h.basis()));
        let out = evolve_unitary(&h, &ramp, &psi, &StepControl::default()).unwrap();
        assert!((out.site_densities()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_evolution_keeps_populations() {
        let ring = build_ring(4, 1.0).unwrap();
        let h = Hamiltonian::full(HamiltonianSpec::from_lattice(&ring, 0.0, 0.0, 3.0).unwrap()).unwrap();
        let ramp = RampProfile::new(vec![0.0, 0.5, 1.0], vec![-3.0, 1.0, 4.0], vec![0.0; 3]).unwrap();
        let amps: Vec<C> = (0..16).map(|k| C::new(1.0 + k as f64, 0.5 * k as f64)).collect();
        let mut psi = StateVector::new(amps, Arc::clone(h.basis())).unwrap();
        psi.normalize().unwrap();
        let out = evolve_unitary(&h, &ramp, &psi, &StepControl::default()).unwrap();
        for (a, b) in psi.probabilities().iter().zip(out.probabilities()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn jump_constants() {
        let j = make_jump_set(&JumpParams::reference()).unwrap();
        assert!((1.0 / j.gamma_scatt - 70.69).abs() < 0.01 * 70.69);
        assert!((j.two_photon_omega - crate::units::mhz(1.6)).abs() < 0.01 * crate::units::mhz(1.6));
        assert!(make_jump_set(&JumpParams::none()).unwrap().is_empty());
        let mut bad = JumpParams::reference();
        bad.delta_int = 0.0;
        assert!(make_jump_set(&bad).is_err());
    }

    #[test]
    fn zero_rate_trajectory_is_unitary() {
        let ring = build_ring(4, 1.0).unwrap();
        let h = Hamiltonian::full(HamiltonianSpec::from_lattice(&ring, 1.0, 0.0, 7.5).unwrap()).unwrap();
        let ramp = linear_ramp(-2.0, 2.0, 4.0, 1.0).unwrap();
        let psi = StateVector::all_ground(Arc::clone(h.basis()));
        let j = make_jump_set(&JumpParams::none()).unwrap();
        let a = evolve_trajectory(&h, &ramp, &j, &psi, 1, 0, &StepControl::default()).unwrap();
        let b = evolve_unitary(&h, &ramp, &psi, &StepControl::default()).unwrap();
        assert!(a.jump_log.is_empty());
        assert_eq!(a.final_state.amps, b.amps);
    }

    #[test]
    fn trajectory_determinism() {
        let ring = build_ring(3, 1.0).unwrap();
        let h = Hamiltonian::full(HamiltonianSpec::from_lattice(&ring, 3.0, 0.0, 2.0).unwrap()).unwrap();
        let ramp = linear_ramp(-3.0, 3.0, 6.0, 3.0).unwrap();
        let j = make_jump_set(&JumpParams::reference().scaled(200.0)).unwrap();
        let psi = StateVector::all_ground(Arc::clone(h.basis()));
        let a = evolve_trajectory(&h, &ramp, &j, &psi, 9, 3, &StepControl::default()).unwrap();
        let b = evolve_trajectory(&h, &ramp, &j, &psi, 9, 3, &StepControl::default()).unwrap();
        assert_eq!(a.jump_log, b.jump_log);
        assert_eq!(a.final_state.amps, b.final_state.amps);
        assert!((a.final_state.norm() - 1.0).abs() < 1e-9);
        for e in &a.jump_log {
            assert!(e.time >= 0.0 && e.time <= ramp.total_time());
        }
    }

    #[test]
    fn lindblad_single_atom_decay() {
        let h = single(0.0);
        let gamma = 0.7;
        let params = JumpParams { gamma_decay: gamma, gamma_e: 0.0, ..JumpParams::reference() };
        let j = make_jump_set(&params).unwrap();
        let ramp = RampProfile::new(vec![0.0, 2.0], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let psi = StateVector::basis_state(Arc::clone(h.basis()), 1).unwrap();
        let rho = lindblad_exact(&h, &ramp, &j, &pure_density(&psi)).unwrap();
        let n = density_matrix_occupations(&h, &rho)[0];
        assert!((n - (-gamma * 2.0f64).exp()).abs() < 1e-9);
        assert!((rho.trace().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lindblad_capacity() {
        let ring = build_ring(7, 1.0).unwrap();
        let h = Hamiltonian::full(HamiltonianSpec::from_lattice(&ring, 1.0, 0.0, 1.0).unwrap()).unwrap();
        let ramp = linear_ramp(0.0, 1.0, 1.0, 1.0).unwrap();
        let j = make_jump_set(&JumpParams::reference()).unwrap();
        let rho = DMatrix::from_element(1, 1, C::new(1.0, 0.0));
        assert!(matches!(lindblad_exact(&h, &ramp, &j, &rho), Err(Error::Capacity { .. })));
    }
}
