//! The Rydberg Hamiltonian
//!
//! H = (Ω/2) Σ_i σˣ_i − Δ Σ_i n_i + Σ_{i<j} V_ij n_i n_j,  V_ij = C6 / R_ij⁶
//!
//! over a bitstring occupation basis (site `i` ↔ bit `i`, `|g…g⟩` is index 0),
//! applied matrix-free. Per-basis-state interaction energies and excitation
//! counts are precomputed once and shared between drives, so a whole detuning
//! sweep reuses the same tables.

use std::ops::{Add, AddAssign, Mul};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::lattice::{euclidean, DisorderSample, Lattice};
use crate::{Error, Result};

/// Hard cap on the number of sites for the full 2^N space.
pub const MAX_FULL_SITES: usize = 30;
const PAR_THRESHOLD: usize = 1 << 12;
const NO_STATE: u32 = u32::MAX;

pub fn blockade_radius(c6: f64, omega: f64) -> Result<f64> {
    if !(c6 > 0.0) || !(omega > 0.0) {
        return Err(Error::domain(format!(
            "blockade radius needs c6 > 0 and omega > 0 (got c6 = {c6}, omega = {omega})"
        )));
    }
    Ok((c6 / omega).powf(1.0 / 6.0))
}

/// `C6 = Ω · (R_b/a)⁶`, the parameterization used throughout.
pub fn c6_from_blockade_ratio(omega: f64, ratio: f64) -> f64 {
    omega * ratio.powi(6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub omega: f64,
    pub delta: f64,
    pub c6: f64,
    pub interaction_cutoff: Option<f64>,
    positions: Vec<[f64; 2]>,
    /// Row-major `n × n`.
    v: Vec<f64>,
}

impl HamiltonianSpec {
    /// Couplings from explicit positions, optionally scaled by per-pair factors
    /// (row-major `n × n`).
    pub fn from_positions(
        positions: &[[f64; 2]],
        omega: f64,
        delta: f64,
        c6: f64,
        factors: Option<&[f64]>,
        interaction_cutoff: Option<f64>,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::domain("hamiltonian needs at least one site"));
        }
        if let Some(f) = factors {
            if f.len() != n * n {
                return Err(Error::Dimension {
                    expected: n * n,
                    found: f.len(),
                });
            }
        }
        if !(c6 >= 0.0) || !omega.is_finite() || !delta.is_finite() {
            return Err(Error::domain("omega, delta must be finite and c6 >= 0"));
        }
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let r = euclidean(positions[i], positions[j]);
                if r <= 0.0 {
                    return Err(Error::domain(format!("sites {i} and {j} coincide")));
                }
                if interaction_cutoff.is_some_and(|rc| r > rc) {
                    continue;
                }
                let scale = factors.map_or(1.0, |f| f[i * n + j]);
                let vij = c6 / r.powi(6) * scale;
                v[i * n + j] = vij;
                v[j * n + i] = vij;
            }
        }
        Ok(Self {
            omega,
            delta,
            c6,
            interaction_cutoff,
            positions: positions.to_vec(),
            v,
        })
    }

    pub fn from_lattice(lattice: &Lattice, omega: f64, delta: f64, c6: f64) -> Result<Self> {
        Self::from_positions(&lattice.coords, omega, delta, c6, None, None)
    }

    pub fn with_disorder(
        disorder: &DisorderSample,
        omega: f64,
        delta: f64,
        c6: f64,
        interaction_cutoff: Option<f64>,
    ) -> Result<Self> {
        Self::from_positions(
            &disorder.displaced_coords,
            omega,
            delta,
            c6,
            Some(&disorder.v_scale_factors),
            interaction_cutoff,
        )
    }

    pub fn n_sites(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.n_sites() + j]
    }

    pub fn v_matrix(&self) -> &[f64] {
        &self.v
    }

    pub fn blockade_radius(&self) -> Result<f64> {
        blockade_radius(self.c6, self.omega)
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..self.clone() }
    }

    pub fn with_drive(&self, omega: f64, delta: f64) -> Self {
        Self {
            omega,
            delta,
            ..self.clone()
        }
    }

    /// Diagonal interaction energy of a bitstring.
    pub fn interaction_energy(&self, bits: u64) -> f64 {
        let n = self.n_sites();
        let mut e = 0.0;
        let mut rest = bits;
        while rest != 0 {
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            let mut others = rest;
            while others != 0 {
                let j = others.trailing_zeros() as usize;
                others &= others - 1;
                e += self.v[i * n + j];
            }
        }
        e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Truncation {
    Full,
    /// Keep only bitstrings with no two excitations within `radius`.
    Blockade { radius: f64 },
}

#[derive(Debug, PartialEq)]
pub struct BasisSpace {
    n_sites: usize,
    truncation: Truncation,
    /// Sorted bitstrings; empty for the full space where index == bitstring.
    states: Vec<u64>,
    dim: usize,
}

impl BasisSpace {
    pub fn full(n_sites: usize) -> Result<Arc<Self>> {
        if n_sites == 0 || n_sites > MAX_FULL_SITES {
            return Err(Error::Capacity {
                what: "full Hilbert space sites".into(),
                limit: MAX_FULL_SITES,
                requested: n_sites,
            });
        }
        Ok(Arc::new(Self {
            n_sites,
            truncation: Truncation::Full,
            states: Vec::new(),
            dim: 1usize << n_sites,
        }))
    }

    /// Bitstrings without two excitations closer than `radius`.
    pub fn blockade_truncated(positions: &[[f64; 2]], radius: f64) -> Result<Arc<Self>> {
        let n = positions.len();
        if n == 0 || n > 63 {
            return Err(Error::Capacity {
                what: "truncated basis sites".into(),
                limit: 63,
                requested: n,
            });
        }
        if !(radius > 0.0) {
            return Err(Error::domain("blockade truncation radius must be positive"));
        }
        // conflicts[i]: mask of lower-index sites blockaded by i
        let conflicts: Vec<u64> = (0..n)
            .map(|i| {
                (0..i)
                    .filter(|&j| euclidean(positions[i], positions[j]) <= radius * (1.0 + 1e-12))
                    .fold(0u64, |m, j| m | (1 << j))
            })
            .collect();
        let mut states = vec![0u64];
        for (i, &c) in conflicts.iter().enumerate() {
            let extra: Vec<u64> = states
                .iter()
                .filter(|&&s| s & c == 0)
                .map(|&s| s | (1 << i))
                .collect();
            states.extend(extra);
        }
        states.sort_unstable();
        if states.len() >= NO_STATE as usize {
            return Err(Error::Capacity {
                what: "truncated basis dimension".into(),
                limit: NO_STATE as usize - 1,
                requested: states.len(),
            });
        }
        let dim = states.len();
        Ok(Arc::new(Self {
            n_sites: n,
            truncation: Truncation::Blockade { radius },
            states,
            dim,
        }))
    }

    pub fn for_spec(spec: &HamiltonianSpec, truncation: Truncation) -> Result<Arc<Self>> {
        match truncation {
            Truncation::Full => Self::full(spec.n_sites()),
            Truncation::Blockade { radius } => Self::blockade_truncated(spec.positions(), radius),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn is_truncated(&self) -> bool {
        !matches!(self.truncation, Truncation::Full)
    }

    #[inline]
    pub fn state(&self, index: usize) -> u64 {
        if self.states.is_empty() {
            index as u64
        } else {
            self.states[index]
        }
    }

    #[inline]
    pub fn index_of(&self, bits: u64) -> Option<usize> {
        if self.states.is_empty() {
            ((bits as usize) < self.dim).then_some(bits as usize)
        } else {
            self.states.binary_search(&bits).ok()
        }
    }

    /// Excitation count of each basis state.
    pub fn excitation_counts(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.state(k).count_ones() as f64).collect()
    }

    /// Per-site occupation of each basis state, `n_i(s)`.
    pub fn occupation(&self, index: usize, site: usize) -> f64 {
        ((self.state(index) >> site) & 1) as f64
    }
}

/// Minimal scalar abstraction so the same kernels run on real vectors (for
/// eigensolvers) and complex vectors (for dynamics).
pub trait Amplitude:
    Copy + Send + Sync + Add<Output = Self> + AddAssign + Mul<Output = Self> + Mul<f64, Output = Self> + 'static
{
    fn zero() -> Self;
    fn from_real(x: f64) -> Self;
}

impl Amplitude for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_real(x: f64) -> Self {
        x
    }
}

impl Amplitude for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
}

/// Coefficients of the generic operator
/// `y[s] = (constant + per_excitation·n(s) + E_int(s))·x[s] + flip·Σ_i x[s ⊕ i]`.
#[derive(Clone, Copy, Debug)]
pub struct OperatorCoefs<T> {
    pub constant: T,
    pub per_excitation: T,
    pub flip: T,
}

#[derive(Debug)]
struct Tables {
    basis: Arc<BasisSpace>,
    interaction: Vec<f64>,
    counts: Vec<f64>,
    /// `dim × n` flip targets for truncated bases, `NO_STATE` if outside.
    flips: Vec<u32>,
}

/// Matrix-free Hamiltonian for one coupling table and basis; the drive
/// (Ω, Δ) can be changed cheaply with [`Hamiltonian::with_drive`].
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    spec: HamiltonianSpec,
    tables: Arc<Tables>,
}

impl Hamiltonian {
    pub fn new(spec: HamiltonianSpec, basis: Arc<BasisSpace>) -> Result<Self> {
        if basis.n_sites() != spec.n_sites() {
            return Err(Error::Dimension {
                expected: spec.n_sites(),
                found: basis.n_sites(),
            });
        }
        let dim = basis.dim();
        let n = basis.n_sites();
        let interaction: Vec<f64> = (0..dim)
            .into_par_iter()
            .map(|k| spec.interaction_energy(basis.state(k)))
            .collect();
        let counts = basis.excitation_counts();
        let flips = if basis.is_truncated() {
            let mut f = vec![NO_STATE; dim * n];
            f.par_chunks_mut(n).enumerate().for_each(|(k, row)| {
                let s = basis.state(k);
                for (i, slot) in row.iter_mut().enumerate() {
                    if let Some(t) = basis.index_of(s ^ (1 << i)) {
                        *slot = t as u32;
                    }
                }
            });
            f
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            tables: Arc::new(Tables {
                basis,
                interaction,
                counts,
                flips,
            }),
        })
    }

    /// Full-space Hamiltonian.
    pub fn full(spec: HamiltonianSpec) -> Result<Self> {
        let basis = BasisSpace::full(spec.n_sites())?;
        Self::new(spec, basis)
    }

    pub fn with_drive(&self, omega: f64, delta: f64) -> Self {
        Self {
            spec: self.spec.with_drive(omega, delta),
            tables: Arc::clone(&self.tables),
        }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        self.with_drive(self.spec.omega, delta)
    }

    pub fn spec(&self) -> &HamiltonianSpec {
        &self.spec
    }

    pub fn basis(&self) -> &Arc<BasisSpace> {
        &self.tables.basis
    }

    pub fn dim(&self) -> usize {
        self.tables.basis.dim()
    }

    pub fn n_sites(&self) -> usize {
        self.spec.n_sites()
    }

    pub fn interaction_diagonal(&self) -> &[f64] {
        &self.tables.interaction
    }

    pub fn excitation_counts(&self) -> &[f64] {
        &self.tables.counts
    }

    /// Diagonal of H at the current drive.
    pub fn diagonal(&self) -> Vec<f64> {
        let d = self.spec.delta;
        self.tables
            .interaction
            .iter()
            .zip(&self.tables.counts)
            .map(|(e, n)| e - d * n)
            .collect()
    }

    /// Cheap upper bound on the spectral norm.
    pub fn norm_estimate(&self) -> f64 {
        let diag_max = self.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        diag_max + 0.5 * self.spec.omega.abs() * self.n_sites() as f64
    }

    /// Generic kernel shared by every real / complex / shifted / non-Hermitian
    /// application.
    pub fn apply_raw<T: Amplitude>(&self, coefs: OperatorCoefs<T>, x: &[T], y: &mut [T]) {
        let t = &*self.tables;
        let n = t.basis.n_sites();
        let dim = t.basis.dim();
        assert_eq!(x.len(), dim);
        assert_eq!(y.len(), dim);
        let truncated = t.basis.is_truncated();
        let kernel = |k: usize| -> T {
            let diag = coefs.constant + coefs.per_excitation * t.counts[k] + T::from_real(t.interaction[k]);
            let mut acc = T::zero();
            if truncated {
                for &tgt in &t.flips[k * n..(k + 1) * n] {
                    if tgt != NO_STATE {
                        acc += x[tgt as usize];
                    }
                }
            } else {
                for i in 0..n {
                    acc += x[k ^ (1 << i)];
                }
            }
            diag * x[k] + coefs.flip * acc
        };
        if dim >= PAR_THRESHOLD {
            y.par_chunks_mut(1024).enumerate().for_each(|(c, chunk)| {
                let base = c * 1024;
                for (o, out) in chunk.iter_mut().enumerate() {
                    *out = kernel(base + o);
                }
            });
        } else {
            for (k, out) in y.iter_mut().enumerate() {
                *out = kernel(k);
            }
        }
    }

    /// `(H − shift)` on real vectors.
    pub fn apply_real(&self, shift: f64, x: &[f64], y: &mut [f64]) {
        let coefs = OperatorCoefs {
            constant: -shift,
            per_excitation: -self.spec.delta,
            flip: 0.5 * self.spec.omega,
        };
        self.apply_raw(coefs, x, y);
    }

    /// `H` on complex amplitude slices.
    pub fn apply_complex(&self, x: &[Complex64], y: &mut [Complex64]) {
        let coefs = OperatorCoefs {
            constant: Complex64::new(0.0, 0.0),
            per_excitation: Complex64::new(-self.spec.delta, 0.0),
            flip: Complex64::new(0.5 * self.spec.omega, 0.0),
        };
        self.apply_raw(coefs, x, y);
    }

    fn check_basis(&self, psi: &StateVector) -> Result<()> {
        if !psi.basis.same_as(&self.tables.basis) {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: psi.dim(),
            });
        }
        Ok(())
    }

    /// H|ψ⟩.
    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        self.apply_shifted(0.0, psi)
    }

    /// (H − shift·I)|ψ⟩.
    pub fn apply_shifted(&self, shift: f64, psi: &StateVector) -> Result<StateVector> {
        self.check_basis(psi)?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.dim()];
        let coefs = OperatorCoefs {
            constant: Complex64::new(-shift, 0.0),
            per_excitation: Complex64::new(-self.spec.delta, 0.0),
            flip: Complex64::new(0.5 * self.spec.omega, 0.0),
        };
        self.apply_raw(coefs, &psi.amps, &mut out);
        Ok(StateVector {
            amps: out,
            basis: Arc::clone(&psi.basis),
        })
    }

    /// ⟨ψ|H|ψ⟩ / ⟨ψ|ψ⟩.
    pub fn expectation_energy(&self, psi: &StateVector) -> Result<f64> {
        let h_psi = self.apply(psi)?;
        let norm = psi.norm_sqr();
        if norm == 0.0 {
            return Err(Error::domain("energy of the zero vector"));
        }
        Ok(psi.inner(&h_psi).re / norm)
    }
}

impl BasisSpace {
    pub fn same_as(&self, other: &BasisSpace) -> bool {
        std::ptr::eq(self, other)
            || (self.n_sites == other.n_sites && self.truncation == other.truncation && self.dim == other.dim)
    }
}

/// Amplitudes over a basis. Norm is not enforced: non-Hermitian evolution
/// legitimately decays it.
#[derive(Clone, Debug)]
pub struct StateVector {
    pub amps: Vec<Complex64>,
    pub basis: Arc<BasisSpace>,
}

impl StateVector {
    pub fn new(amps: Vec<Complex64>, basis: Arc<BasisSpace>) -> Result<Self> {
        if amps.len() != basis.dim() {
            return Err(Error::Dimension {
                expected: basis.dim(),
                found: amps.len(),
            });
        }
        if amps.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::domain("state amplitudes must be finite"));
        }
        Ok(Self { amps, basis })
    }

    /// A single occupation bitstring.
    pub fn basis_state(basis: Arc<BasisSpace>, bits: u64) -> Result<Self> {
        let idx = basis
            .index_of(bits)
            .ok_or_else(|| Error::domain(format!("bitstring {bits:#b} not in basis")))?;
        let mut amps = vec![Complex64::new(0.0, 0.0); basis.dim()];
        amps[idx] = Complex64::new(1.0, 0.0);
        Ok(Self { amps, basis })
    }

    pub fn all_ground(basis: Arc<BasisSpace>) -> Self {
        Self::basis_state(basis, 0).expect("|g...g> is always in the basis")
    }

    pub fn from_real(values: &[f64], basis: Arc<BasisSpace>) -> Result<Self> {
        Self::new(values.iter().map(|&x| Complex64::new(x, 0.0)).collect(), basis)
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn n_sites(&self) -> usize {
        self.basis.n_sites()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::domain("cannot normalize the zero vector"));
        }
        let inv = 1.0 / n;
        self.amps.iter_mut().for_each(|a| *a *= inv);
        Ok(())
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr() / (self.norm_sqr() * other.norm_sqr())
    }

    /// Born probabilities in basis order.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// ⟨n_i⟩ for every site (normalized by the state norm).
    pub fn site_densities(&self) -> Vec<f64> {
        let n = self.n_sites();
        let mut out = vec![0.0; n];
        let norm = self.norm_sqr();
        for (k, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            let mut s = self.basis.state(k);
            while s != 0 {
                let i = s.trailing_zeros() as usize;
                s &= s - 1;
                out[i] += p;
            }
        }
        out.iter_mut().for_each(|x| *x /= norm);
        out
    }

    /// Expectation of a diagonal observable given as a function of the bitstring.
    pub fn expect_diagonal(&self, f: impl Fn(u64) -> f64) -> f64 {
        let norm = self.norm_sqr();
        self.amps
            .iter()
            .enumerate()
            .map(|(k, a)| a.norm_sqr() * f(self.basis.state(k)))
            .sum::<f64>()
            / norm
    }
}

/// Dense constructors built directly from matrix-element definitions. They
/// serve as independent oracles for the matrix-free kernels and as the
/// operator source for the dense master-equation integrator.
pub mod dense {
    use super::*;

    /// ⟨s|H|s'⟩ assembled pair by pair from the coupling table.
    pub fn hamiltonian(spec: &HamiltonianSpec, basis: &BasisSpace) -> DMatrix<f64> {
        let dim = basis.dim();
        let n = spec.n_sites();
        let mut h = DMatrix::zeros(dim, dim);
        for r in 0..dim {
            let sr = basis.state(r);
            for c in 0..dim {
                let sc = basis.state(c);
                let diff = sr ^ sc;
                if diff == 0 {
                    let mut e = 0.0;
                    for i in 0..n {
                        if (sr >> i) & 1 == 1 {
                            e -= spec.delta;
                            for j in i + 1..n {
                                if (sr >> j) & 1 == 1 {
                                    e += spec.c6_scaled_coupling(i, j);
                                }
                            }
                        }
                    }
                    h[(r, c)] = e;
                } else if diff.count_ones() == 1 {
                    h[(r, c)] = spec.omega / 2.0;
                }
            }
        }
        h
    }

    pub fn hamiltonian_complex(spec: &HamiltonianSpec, basis: &BasisSpace) -> DMatrix<Complex64> {
        hamiltonian(spec, basis).map(|x| Complex64::new(x, 0.0))
    }

    /// Embed a single-site 2×2 operator (basis order g, r) into the many-body
    /// basis. Matrix elements that leave a truncated basis are dropped.
    pub fn site_operator(basis: &BasisSpace, site: usize, local: [[Complex64; 2]; 2]) -> DMatrix<Complex64> {
        let dim = basis.dim();
        let mut m = DMatrix::from_element(dim, dim, Complex64::new(0.0, 0.0));
        for c in 0..dim {
            let sc = basis.state(c);
            let bc = ((sc >> site) & 1) as usize;
            for br in 0..2usize {
                let amp = local[br][bc];
                if amp == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let sr = (sc & !(1 << site)) | ((br as u64) << site);
                if let Some(r) = basis.index_of(sr) {
                    m[(r, c)] += amp;
                }
            }
        }
        m
    }
}

impl HamiltonianSpec {
    fn c6_scaled_coupling(&self, i: usize, j: usize) -> f64 {
        self.v(i, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_ring, build_square};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_site(omega: f64, delta: f64) -> Hamiltonian {
        let spec = HamiltonianSpec::from_positions(&[[0.0, 0.0]], omega, delta, 1.0, None, None).unwrap();
        Hamiltonian::full(spec).unwrap()
    }

    fn random_state(basis: Arc<BasisSpace>, rng: &mut ChaCha8Rng) -> StateVector {
        let amps = (0..basis.dim())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        StateVector::new(amps, basis).unwrap()
    }

    #[test]
    fn blockade_radius_values() {
        assert!((blockade_radius(1.4f64.powi(6), 1.0).unwrap() - 1.4).abs() < 1e-12);
        assert!((blockade_radius(1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let omega = crate::units::mhz(1.6);
        let c6 = c6_from_blockade_ratio(omega, 1.25);
        assert!((blockade_radius(c6, omega).unwrap() - 1.25).abs() < 1e-12);
        assert!(blockade_radius(0.0, 1.0).is_err());
        assert!(blockade_radius(1.0, -1.0).is_err());
    }

    #[test]
    fn single_atom_actions() {
        let h = single_site(0.0, 2.0);
        let r = StateVector::basis_state(Arc::clone(h.basis()), 1).unwrap();
        let out = h.apply(&r).unwrap();
        assert!((out.amps[1] - Complex64::new(-2.0, 0.0)).norm() < 1e-15);
        assert_eq!(out.amps[0], Complex64::new(0.0, 0.0));

        let h = single_site(2.0, 0.0);
        let g = StateVector::all_ground(Arc::clone(h.basis()));
        let out = h.apply(&g).unwrap();
        assert!((out.amps[1] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(out.amps[0], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn pair_interaction() {
        let spec = HamiltonianSpec::from_positions(&[[0.0, 0.0], [1.0, 0.0]], 0.0, 0.7, 4.0, None, None).unwrap();
        let h = Hamiltonian::full(spec).unwrap();
        let rr = StateVector::basis_state(Arc::clone(h.basis()), 0b11).unwrap();
        let out = h.apply(&rr).unwrap();
        assert!((out.amps[3].re - (-2.0 * 0.7 + 4.0)).abs() < 1e-14);
    }

    #[test]
    fn energies_and_shift() {
        let h = single_site(2.0, 0.0);
        let basis = Arc::clone(h.basis());
        let plus = StateVector::from_real(&[0.5f64.sqrt(), 0.5f64.sqrt()], Arc::clone(&basis)).unwrap();
        assert!((h.expectation_energy(&plus).unwrap() - 1.0).abs() < 1e-14);
        // ground state of (Ω/2)σx with Ω=2 is (|g⟩ − |r⟩)/√2 at E0 = −1
        let minus = StateVector::from_real(&[0.5f64.sqrt(), -(0.5f64.sqrt())], basis).unwrap();
        let shifted = h.apply_shifted(-1.0, &minus).unwrap();
        assert!(shifted.norm() < 1e-15);

        let ring = build_ring(6, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&ring, 1.3, -0.4, 2.0).unwrap();
        let h = Hamiltonian::full(spec).unwrap();
        let g = StateVector::all_ground(Arc::clone(h.basis()));
        assert_eq!(h.expectation_energy(&g).unwrap(), 0.0);
    }

    #[test]
    fn basis_mismatch_is_error() {
        let h = single_site(1.0, 0.0);
        let other = BasisSpace::full(2).unwrap();
        let psi = StateVector::all_ground(other);
        assert!(matches!(h.apply(&psi), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matrix_free_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 3, 5, 8] {
            let ring = build_ring(n.max(3), 1.0).unwrap();
            let coords = &ring.coords[..n];
            for trunc in [Truncation::Full, Truncation::Blockade { radius: 1.1 }] {
                let spec = HamiltonianSpec::from_positions(coords, 1.7, 0.9, 3.1, None, None).unwrap();
                let basis = BasisSpace::for_spec(&spec, trunc).unwrap();
                let h = Hamiltonian::new(spec.clone(), Arc::clone(&basis)).unwrap();
                let dense = dense::hamiltonian_complex(&spec, &basis);
                let psi = random_state(Arc::clone(&basis), &mut rng);
                let got = h.apply(&psi).unwrap();
                let want = &dense * nalgebra::DVector::from_vec(psi.amps.clone());
                for k in 0..basis.dim() {
                    assert!((got.amps[k] - want[k]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hermiticity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sq = build_square(3, 3, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&sq, 2.0, 1.1, 2.0 * 1.25f64.powi(6)).unwrap();
        let h = Hamiltonian::full(spec).unwrap();
        for _ in 0..5 {
            let phi = random_state(Arc::clone(h.basis()), &mut rng);
            let psi = random_state(Arc::clone(h.basis()), &mut rng);
            let a = phi.inner(&h.apply(&psi).unwrap());
            let b = psi.inner(&h.apply(&phi).unwrap()).conj();
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn van_der_waals_scaling() {
        let near = HamiltonianSpec::from_positions(&[[0.0, 0.0], [1.3, 0.0]], 1.0, 0.0, 5.0, None, None).unwrap();
        let far = HamiltonianSpec::from_positions(&[[0.0, 0.0], [2.6, 0.0]], 1.0, 0.0, 5.0, None, None).unwrap();
        assert_eq!(near.v(0, 1) / 64.0, far.v(0, 1));
        assert_eq!(near.v(0, 0), 0.0);
        assert_eq!(near.v(0, 1), near.v(1, 0));
    }

    #[test]
    fn cutoff_drops_long_range_pairs() {
        let ring = build_ring(8, 1.0).unwrap();
        let spec = HamiltonianSpec::from_positions(&ring.coords, 1.0, 0.0, 1.0, None, Some(1.5)).unwrap();
        assert!(spec.v(0, 1) > 0.0);
        assert_eq!(spec.v(0, 2), 0.0);
    }

    #[test]
    fn truncated_basis_counts() {
        // independent sets of a cycle C_n are Lucas numbers
        let lucas = |n: usize| {
            let (mut a, mut b) = (2usize, 1usize);
            for _ in 0..n {
                (a, b) = (b, a + b);
            }
            a
        };
        for n in [4, 7, 10] {
            let ring = build_ring(n, 1.0).unwrap();
            let basis = BasisSpace::blockade_truncated(&ring.coords, 1.2).unwrap();
            assert_eq!(basis.dim(), lucas(n));
            for k in 0..basis.dim() {
                assert_eq!(basis.index_of(basis.state(k)), Some(k));
            }
        }
    }
}
