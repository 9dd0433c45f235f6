//! Ground states, excitation gaps and gap profiles E_g(Δ).
//!
//! [`gap`] is the full-spectrum E1 − E0. In the ordered phase of a finite
//! ring that gap collapses onto the quasi-degenerate partner of the ground
//! state, which a uniform drive never couples to. [`sector_gap`] restricts the
//! problem to the fully symmetric sector of the lattice symmetry group, which
//! is the gap a uniform ramp actually has to respect; gap profiles use it
//! whenever the couplings are symmetric.

use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hamiltonian::{Hamiltonian, HamiltonianSpec, StateVector};
use crate::lattice::{Geometry, Lattice};
use crate::linalg::{lowest_eigenpairs, EigenOptions};
use crate::{Error, Result};

/// Relative residual target (times ‖H‖_est); tighter than the 1e-8 contract.
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_SEED: u64 = 0x9a9;

fn degeneracy_threshold(omega: f64) -> f64 {
    1e-10f64.max(1e-8 * omega.abs())
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            seed: DEFAULT_SEED,
        }
    }
}

impl SolverOptions {
    fn eigen(&self, h: &Hamiltonian, n_eigs: usize) -> EigenOptions {
        EigenOptions {
            n_eigs,
            tol: self.tol,
            scale: h.norm_estimate().max(1e-12),
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// A group of site permutations that leave the coupling table invariant.
#[derive(Clone, Debug)]
pub struct SymmetryGroup {
    /// Every element, identity first.
    elements: Vec<Vec<usize>>,
}

fn ring_generators(n: usize) -> Vec<Vec<Vec<usize>>> {
    let shift: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    let reflect: Vec<usize> = (0..n).map(|i| (n - i) % n).collect();
    vec![vec![shift, reflect]]
}

fn square_generators(nx: usize, ny: usize) -> Vec<Vec<Vec<usize>>> {
    let idx = |x: usize, y: usize| y * nx + x;
    let mx: Vec<usize> = (0..nx * ny).map(|k| idx(nx - 1 - k % nx, k / nx)).collect();
    let my: Vec<usize> = (0..nx * ny).map(|k| idx(k % nx, ny - 1 - k / nx)).collect();
    let mut sets = Vec::new();
    if nx == ny {
        let rot: Vec<usize> = (0..nx * ny).map(|k| idx(ny - 1 - k / nx, k % nx)).collect();
        sets.push(vec![rot, mx.clone()]);
    }
    sets.push(vec![mx, my]);
    sets
}

fn preserves(spec: &HamiltonianSpec, perm: &[usize]) -> bool {
    let n = spec.n_sites();
    let vmax = spec.v_matrix().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * vmax.max(1e-300);
    (0..n).all(|i| (0..n).all(|j| (spec.v(perm[i], perm[j]) - spec.v(i, j)).abs() <= tol))
}

fn permute_bits(s: u64, perm: &[usize]) -> u64 {
    let mut t = 0u64;
    let mut rest = s;
    while rest != 0 {
        let i = rest.trailing_zeros() as usize;
        rest &= rest - 1;
        t |= 1 << perm[i];
    }
    t
}

impl SymmetryGroup {
    pub fn trivial(n_sites: usize) -> Self {
        Self {
            elements: vec![(0..n_sites).collect()],
        }
    }

    /// Geometric symmetries of `lattice` that the Hamiltonian's couplings
    /// actually respect. Disorder typically leaves only the identity.
    pub fn detect(lattice: &Lattice, spec: &HamiltonianSpec) -> Result<Self> {
        if lattice.n_sites() != spec.n_sites() {
            return Err(Error::Dimension {
                expected: spec.n_sites(),
                found: lattice.n_sites(),
            });
        }
        let candidates = match lattice.geometry {
            Geometry::Ring => ring_generators(lattice.n_sites()),
            Geometry::Square { nx, ny } => square_generators(nx, ny),
        };
        let mut chosen: Vec<Vec<usize>> = Vec::new();
        for set in &candidates {
            if set.iter().all(|p| preserves(spec, p)) {
                chosen = set.clone();
                break;
            }
        }
        if chosen.is_empty() {
            if let Some(p) = candidates.iter().flatten().find(|p| preserves(spec, p)) {
                chosen.push(p.clone());
            }
        }
        Self::generated_by(spec.n_sites(), &chosen)
    }

    /// Closure of the given site permutations under composition.
    pub fn generated_by(n_sites: usize, generators: &[Vec<usize>]) -> Result<Self> {
        if let Some(g) = generators.iter().find(|g| g.len() != n_sites) {
            return Err(Error::Dimension {
                expected: n_sites,
                found: g.len(),
            });
        }
        let identity: Vec<usize> = (0..n_sites).collect();
        let mut elements = vec![identity.clone()];
        let mut seen = std::collections::HashSet::from([identity]);
        let mut k = 0;
        while k < elements.len() {
            for g in generators {
                let next: Vec<usize> = elements[k].iter().map(|&p| g[p]).collect();
                if seen.insert(next.clone()) {
                    elements.push(next);
                }
            }
            k += 1;
        }
        Ok(Self { elements })
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn is_trivial(&self) -> bool {
        self.elements.len() == 1
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }
}

/// The Hamiltonian restricted to the fully symmetric sector, in the basis of
/// normalized orbit sums |O⟩ = |O|^(-1/2) Σ_{s∈O} |s⟩. The drive enters only
/// at application time, so one sector serves a whole detuning sweep.
#[derive(Clone, Debug)]
pub struct SymmetricSector {
    interaction: Vec<f64>,
    counts: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    /// ⟨O'|Σσˣ|O⟩ = m(O→O')·√(|O|/|O'|)
    weights: Vec<f64>,
    orbit_sizes: Vec<usize>,
}

impl SymmetricSector {
    pub fn new(h: &Hamiltonian, group: &SymmetryGroup) -> Result<Self> {
        let basis = h.basis();
        let dim = basis.dim();
        let n = basis.n_sites();
        let mut orbit_of = vec![u32::MAX; dim];
        let mut reps: Vec<usize> = Vec::new();
        let mut sizes: Vec<usize> = Vec::new();
        for k in 0..dim {
            if orbit_of[k] != u32::MAX {
                continue;
            }
            let id = reps.len() as u32;
            let s = basis.state(k);
            let mut size = 0;
            for g in group.elements() {
                let t = basis
                    .index_of(permute_bits(s, g))
                    .ok_or_else(|| Error::domain("basis is not closed under the symmetry"))?;
                if orbit_of[t] == u32::MAX {
                    orbit_of[t] = id;
                    size += 1;
                }
            }
            reps.push(k);
            sizes.push(size);
        }
        let rows: Vec<Vec<(u32, f64)>> = reps
            .par_iter()
            .enumerate()
            .map(|(o, &k)| {
                let s = basis.state(k);
                let mut row: Vec<(u32, f64)> = Vec::with_capacity(n);
                for i in 0..n {
                    if let Some(t) = basis.index_of(s ^ (1 << i)) {
                        let target = orbit_of[t];
                        match row.iter_mut().find(|(c, _)| *c == target) {
                            Some(e) => e.1 += 1.0,
                            None => row.push((target, 1.0)),
                        }
                    }
                }
                // H is symmetric, so ⟨O|σ|O'⟩ = ⟨O'|σ|O⟩ = m(O→O')·√(|O|/|O'|)
                for e in row.iter_mut() {
                    e.1 *= (sizes[o] as f64 / sizes[e.0 as usize] as f64).sqrt();
                }
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(reps.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, w) in row {
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        let interaction = reps.iter().map(|&k| h.interaction_diagonal()[k]).collect();
        let counts = reps.iter().map(|&k| h.excitation_counts()[k]).collect();
        Ok(Self {
            interaction,
            counts,
            row_ptr,
            cols,
            weights,
            orbit_sizes: sizes,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn orbit_sizes(&self) -> &[usize] {
        &self.orbit_sizes
    }

    pub fn apply(&self, omega: f64, delta: f64, x: &[f64], y: &mut [f64]) {
        let half = 0.5 * omega;
        let row = |o: usize| -> f64 {
            let mut acc = 0.0;
            for e in self.row_ptr[o]..self.row_ptr[o + 1] {
                acc += self.weights[e] * x[self.cols[e] as usize];
            }
            (self.interaction[o] - delta * self.counts[o]) * x[o] + half * acc
        };
        if y.len() >= 1 << 12 {
            y.par_iter_mut().enumerate().for_each(|(o, out)| *out = row(o));
        } else {
            y.iter_mut().enumerate().for_each(|(o, out)| *out = row(o));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub e0: f64,
    pub e1: f64,
    pub gap: f64,
    /// E1 − E0 below max(1e-10, 1e-8·Ω).
    pub degenerate: bool,
}

fn lowest(h: &Hamiltonian, n_eigs: usize, sector: Option<&SymmetricSector>, opts: &SolverOptions) -> Result<crate::linalg::EigenResult> {
    let eo = opts.eigen(h, n_eigs);
    match sector {
        Some(sec) => {
            let (omega, delta) = (h.spec().omega, h.spec().delta);
            let apply = |x: &[f64], y: &mut [f64]| sec.apply(omega, delta, x, y);
            lowest_eigenpairs(sec.dim(), apply, None::<fn(&mut [f64])>, &eo)
        }
        None => {
            let apply = |x: &[f64], y: &mut [f64]| h.apply_real(0.0, x, y);
            lowest_eigenpairs(h.dim(), apply, None::<fn(&mut [f64])>, &eo)
        }
    }
}

pub fn ground_state_with(h: &Hamiltonian, opts: &SolverOptions) -> Result<(f64, StateVector)> {
    let res = lowest(h, 1, None, opts)?;
    let vec = res.vectors[0]
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .collect();
    Ok((res.values[0], StateVector::new(vec, Arc::clone(h.basis()))?))
}

/// Lowest eigenpair, deterministic for the default seed.
pub fn ground_state(h: &Hamiltonian) -> Result<(f64, StateVector)> {
    ground_state_with(h, &SolverOptions::default())
}

fn gap_from(h: &Hamiltonian, sector: Option<&SymmetricSector>, opts: &SolverOptions) -> Result<GapResult> {
    if h.dim() < 2 {
        return Err(Error::domain("gap needs a basis of dimension >= 2"));
    }
    let res = lowest(h, 2, sector, opts)?;
    if res.values.len() < 2 {
        return Err(Error::domain("symmetric sector holds fewer than two states"));
    }
    let (e0, e1) = (res.values[0], res.values[1]);
    let gap = (e1 - e0).max(0.0);
    let degenerate = gap < degeneracy_threshold(h.spec().omega);
    if degenerate {
        log::warn!("near-degenerate ground state: E1 - E0 = {gap:e}");
    }
    Ok(GapResult { e0, e1, gap, degenerate })
}

/// E1 − E0 over the full spectrum.
pub fn gap(h: &Hamiltonian) -> Result<GapResult> {
    gap_from(h, None, &SolverOptions::default())
}

pub fn gap_with(h: &Hamiltonian, opts: &SolverOptions) -> Result<GapResult> {
    gap_from(h, None, opts)
}

/// E1 − E0 within the fully symmetric sector of `group`.
pub fn sector_gap(h: &Hamiltonian, group: &SymmetryGroup, opts: &SolverOptions) -> Result<GapResult> {
    if group.is_trivial() {
        return gap_from(h, None, opts);
    }
    let sector = SymmetricSector::new(h, group)?;
    gap_from(h, Some(&sector), opts)
}

#[derive(Clone, Debug, Default)]
pub enum GapMode {
    FullSpectrum,
    /// Detect lattice symmetries from the couplings; falls back to the full
    /// spectrum when none survive.
    #[default]
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    pub delta_grid: Vec<f64>,
    pub gaps: Vec<f64>,
    pub ground_energies: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Order of the symmetry group the gaps were resolved in (1 = full spectrum).
    pub sector_order: usize,
    pub spec_template: HamiltonianSpec,
}

impl GapProfile {
    pub fn len(&self) -> usize {
        self.delta_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_grid.is_empty()
    }

    /// Index and value of the smallest gap.
    pub fn minimum(&self) -> (usize, f64) {
        self.gaps
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &g)| if g < acc.1 { (i, g) } else { acc })
    }

    /// Detuning of the gap minimum, refined by a parabola through the three
    /// grid points around it.
    pub fn minimum_location(&self) -> f64 {
        let (i, _) = self.minimum();
        if i == 0 || i + 1 >= self.len() {
            return self.delta_grid[i];
        }
        let (x0, x1, x2) = (self.delta_grid[i - 1], self.delta_grid[i], self.delta_grid[i + 1]);
        let (y0, y1, y2) = (self.gaps[i - 1], self.gaps[i], self.gaps[i + 1]);
        let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
        let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
        let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
        if a > 0.0 {
            (-b / (2.0 * a)).clamp(x0, x2)
        } else {
            x1
        }
    }

    /// Linear interpolation of E_g(Δ); errors outside the grid span.
    pub fn gap_at(&self, delta: f64) -> Result<f64> {
        let g = &self.delta_grid;
        let (lo, hi) = (g[0], g[g.len() - 1]);
        let slack = 1e-12 * (hi - lo).abs().max(1.0);
        if delta < lo - slack || delta > hi + slack {
            return Err(Error::domain(format!(
                "detuning {delta} outside the profile span [{lo}, {hi}]"
            )));
        }
        if g.len() == 1 {
            return Ok(self.gaps[0]);
        }
        let k = g.partition_point(|&x| x <= delta).clamp(1, g.len() - 1);
        let t = ((delta - g[k - 1]) / (g[k] - g[k - 1])).clamp(0.0, 1.0);
        Ok(self.gaps[k - 1] + t * (self.gaps[k] - self.gaps[k - 1]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,E0,gap\n");
        for k in 0..self.len() {
            let _ = writeln!(s, "{},{},{}", self.delta_grid[k], self.ground_energies[k], self.gaps[k]);
        }
        s
    }

    pub fn from_csv(text: &str, spec_template: HamiltonianSpec) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty gap profile".into()))?;
        if header.trim() != "delta,E0,gap" {
            return Err(Error::Parse(format!("unexpected gap profile header {header:?}")));
        }
        let mut p = GapProfile {
            delta_grid: Vec::new(),
            gaps: Vec::new(),
            ground_energies: Vec::new(),
            degenerate: Vec::new(),
            sector_order: 1,
            spec_template,
        };
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("gap profile row {}: {e}", i + 1)))?;
            if cols.len() != 3 {
                return Err(Error::Parse(format!("gap profile row {} has {} columns", i + 1, cols.len())));
            }
            p.delta_grid.push(cols[0]);
            p.ground_energies.push(cols[1]);
            p.gaps.push(cols[2]);
            p.degenerate.push(cols[2] < degeneracy_threshold(p.spec_template.omega));
        }
        Ok(p)
    }
}

/// E0 and E_g on every grid point. Points are solved independently (no warm
/// starts), so the result does not depend on evaluation order.
pub fn gap_profile(
    h_template: &Hamiltonian,
    lattice: Option<&Lattice>,
    delta_grid: &[f64],
    mode: &GapMode,
    opts: &SolverOptions,
) -> Result<GapProfile> {
    if delta_grid.is_empty() {
        return Err(Error::domain("gap profile grid is empty"));
    }
    if delta_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("gap profile grid must be strictly increasing"));
    }
    let group = match (mode, lattice) {
        (GapMode::Symmetric, Some(l)) => SymmetryGroup::detect(l, h_template.spec())?,
        _ => SymmetryGroup::trivial(h_template.n_sites()),
    };
    let sector = if group.is_trivial() {
        None
    } else {
        Some(SymmetricSector::new(h_template, &group)?)
    };
    let results: Vec<Result<GapResult>> = delta_grid
        .par_iter()
        .enumerate()
        .map(|(k, &d)| {
            let h = h_template.with_delta(d);
            gap_from(&h, sector.as_ref(), opts).map_err(|e| Error::AtGridPoint {
                index: k,
                source: Box::new(e),
            })
        })
        .collect();
    let mut profile = GapProfile {
        delta_grid: delta_grid.to_vec(),
        gaps: Vec::with_capacity(delta_grid.len()),
        ground_energies: Vec::with_capacity(delta_grid.len()),
        degenerate: Vec::with_capacity(delta_grid.len()),
        sector_order: group.order(),
        spec_template: h_template.spec().clone(),
    };
    for r in results {
        let r = r?;
        profile.gaps.push(r.gap);
        profile.ground_energies.push(r.e0);
        profile.degenerate.push(r.degenerate);
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::dense;
    use crate::lattice::{build_ring, build_square};
    use nalgebra::SymmetricEigen;

    fn dense_levels(h: &Hamiltonian) -> Vec<f64> {
        let m = dense::hamiltonian(h.spec(), h.basis());
        let mut v: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().cloned().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    fn single(omega: f64, delta: f64) -> Hamiltonian {
        let spec = HamiltonianSpec::from_positions(&[[0.0, 0.0]], omega, delta, 1.0, None, None).unwrap();
        Hamiltonian::full(spec).unwrap()
    }

    #[test]
    fn single_atom_cases() {
        let (e0, psi) = ground_state(&single(0.0, -1.0)).unwrap();
        assert!(e0.abs() < 1e-14);
        assert!((psi.amps[0].norm() - 1.0).abs() < 1e-12);
        let (e0, _) = ground_state(&single(2.0, 0.0)).unwrap();
        assert!((e0 + 1.0).abs() < 1e-12);
        assert!((gap(&single(0.0, -1.0)).unwrap().gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decoupled_pair() {
        let spec = HamiltonianSpec::from_positions(&[[0.0, 0.0], [1e3, 0.0]], 0.0, -1.0, 1e-12, None, None).unwrap();
        let h = Hamiltonian::full(spec).unwrap();
        let g = gap(&h).unwrap();
        assert!((g.gap - 1.0).abs() < 1e-12);
        let levels = dense_levels(&h);
        assert!((levels[1] - levels[2]).abs() < 1e-12);
    }

    #[test]
    fn weak_drive_gap_is_detuning() {
        let spec = HamiltonianSpec::from_positions(&[[0.0, 0.0], [1.0, 0.0]], 1e-6, -0.8, 3.0, None, None).unwrap();
        let g = gap(&Hamiltonian::full(spec).unwrap()).unwrap();
        assert!((g.gap - 0.8).abs() < 1e-6);
    }

    #[test]
    fn ring4_matches_dense() {
        let ring = build_ring(4, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&ring, 1.0, 0.7, 1.4f64.powi(6)).unwrap();
        let h = Hamiltonian::full(spec).unwrap();
        let levels = dense_levels(&h);
        let g = gap(&h).unwrap();
        assert!((g.e0 - levels[0]).abs() < 1e-9);
        assert!((g.e1 - levels[1]).abs() < 1e-9);
    }

    #[test]
    fn large_basis_matches_dense() {
        // dim 256 exercises the iterative path
        let ring = build_ring(8, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&ring, 1.0, 1.3, 1.4f64.powi(6)).unwrap();
        let h = Hamiltonian::full(spec).unwrap();
        let levels = dense_levels(&h);
        let g = gap(&h).unwrap();
        assert!((g.e0 - levels[0]).abs() < 1e-8);
        assert!((g.e1 - levels[1]).abs() < 1e-8);
    }

    #[test]
    fn symmetry_group_orders() {
        let ring = build_ring(6, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&ring, 1.0, 0.0, 2.0).unwrap();
        assert_eq!(SymmetryGroup::detect(&ring, &spec).unwrap().order(), 12);
        let sq = build_square(3, 3, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&sq, 1.0, 0.0, 2.0).unwrap();
        assert_eq!(SymmetryGroup::detect(&sq, &spec).unwrap().order(), 8);
        let rect = build_square(3, 2, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&rect, 1.0, 0.0, 2.0).unwrap();
        assert_eq!(SymmetryGroup::detect(&rect, &spec).unwrap().order(), 4);
    }

    #[test]
    fn disorder_breaks_symmetry() {
        let ring = build_ring(6, 1.0).unwrap();
        let d = crate::lattice::sample_disorder(&ring, 0.2, Default::default(), 4).unwrap();
        let spec = HamiltonianSpec::with_disorder(&d, 1.0, 0.0, 2.0, None).unwrap();
        assert!(SymmetryGroup::detect(&ring, &spec).unwrap().is_trivial());
    }

    #[test]
    fn sector_levels_are_symmetric_levels() {
        // dense oracle: levels whose eigenvectors survive the group average
        let ring = build_ring(6, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&ring, 1.0, 1.8, 1.4f64.powi(6)).unwrap();
        let h = Hamiltonian::full(spec.clone()).unwrap();
        let group = SymmetryGroup::detect(&ring, &spec).unwrap();
        let m = dense::hamiltonian(&spec, h.basis());
        let eig = SymmetricEigen::new(m);
        let mut sym: Vec<f64> = Vec::new();
        for k in 0..eig.eigenvalues.len() {
            let v = eig.eigenvectors.column(k);
            let mut avg = vec![0.0; h.dim()];
            for g in group.elements() {
                for s in 0..h.dim() {
                    avg[permute_bits(s as u64, g) as usize] += v[s] / group.order() as f64;
                }
            }
            if avg.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                sym.push(eig.eigenvalues[k]);
            }
        }
        sym.sort_by(f64::total_cmp);
        let g = sector_gap(&h, &group, &SolverOptions::default()).unwrap();
        assert!((g.e0 - sym[0]).abs() < 1e-9);
        assert!((g.e1 - sym[1]).abs() < 1e-9);
        let full = gap(&h).unwrap();
        assert!(full.gap < g.gap);
    }

    #[test]
    fn profile_csv_round_trip() {
        let ring = build_ring(4, 1.0).unwrap();
        let spec = HamiltonianSpec::from_lattice(&ring, 1.0, 0.0, 1.4f64.powi(6)).unwrap();
        let h = Hamiltonian::full(spec.clone()).unwrap();
        let p = gap_profile(&h, Some(&ring), &[-1.0, 0.0, 1.0], &GapMode::Symmetric, &SolverOptions::default()).unwrap();
        let q = GapProfile::from_csv(&p.to_csv(), spec).unwrap();
        for k in 0..3 {
            assert!((p.gaps[k] - q.gaps[k]).abs() < 1e-12);
        }
    }
}
