//! Lattice fields, two-point correlators, order parameters and densities,
//! estimated from snapshots or evaluated exactly on a state.
//!
//! Every field used here is diagonal in the occupation basis, so exact
//! expectations are Born-weighted sums over bitstrings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::hamiltonian::StateVector;
use crate::lattice::{chord_distance, Lattice};
use crate::measurement::SnapshotSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    /// Staggered density on ring sites, or the bond operator on squares.
    Sigma,
    /// Link-centred density sum on rings.
    Epsilon,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    All,
    Bulk,
    Boundary,
}

#[inline]
fn bit(bits: u64, i: usize) -> f64 {
    ((bits >> i) & 1) as f64
}

fn require_ring(lattice: &Lattice) -> Result<()> {
    if lattice.is_ring() {
        Ok(())
    } else {
        Err(Error::InvalidGeometry("field is defined on rings only".into()))
    }
}

/// σ_i = (−1)^i (n_i − ⟨n⟩).
pub fn sigma_1d(lattice: &Lattice, bits: u64, mean_n: f64) -> Result<Vec<f64>> {
    require_ring(lattice)?;
    Ok(sigma_1d_raw(lattice.n_sites(), bits, mean_n))
}

fn sigma_1d_raw(n: usize, bits: u64, mean_n: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (bit(bits, i) - mean_n)
        })
        .collect()
}

/// ε_{i+1/2} = (n_i + n_{i+1}) − ⟨n⟩, indexed by the link's lower site.
pub fn epsilon_1d(lattice: &Lattice, bits: u64, mean_n: f64) -> Result<Vec<f64>> {
    require_ring(lattice)?;
    Ok(epsilon_1d_raw(lattice.n_sites(), bits, mean_n))
}

fn epsilon_1d_raw(n: usize, bits: u64, mean_n: f64) -> Vec<f64> {
    (0..n).map(|i| bit(bits, i) + bit(bits, (i + 1) % n) - mean_n).collect()
}

/// σ_b = (−1)^{x_a+y_a}(n_a − n_b) for each bond (a, b); the first site
/// fixes the sign.
pub fn sigma_2d_bonds(lattice: &Lattice, bits: u64) -> Result<Vec<f64>> {
    if lattice.is_ring() {
        return Err(Error::InvalidGeometry("bond field is defined on square lattices only".into()));
    }
    Ok(sigma_2d_raw(lattice, bits))
}

fn sigma_2d_raw(lattice: &Lattice, bits: u64) -> Vec<f64> {
    lattice
        .bonds
        .iter()
        .map(|b| b.parity as f64 * (bit(bits, b.a) - bit(bits, b.b)))
        .collect()
}

/// Which carriers a field lives on and how far apart they are.
struct Carriers {
    indices: Vec<usize>,
    /// Sorted distinct distances.
    bins: Vec<f64>,
    /// (carrier a, carrier b, bin) over unordered pairs including a == b;
    /// carriers are positions in `indices`.
    pairs: Vec<(usize, usize, usize)>,
    counts: Vec<usize>,
}

fn bin_key(d: f64) -> i64 {
    (d * 1e6).round() as i64
}

impl Carriers {
    fn new(lattice: &Lattice, field: Field, region: Region) -> Result<Self> {
        let (indices, dist): (Vec<usize>, Box<dyn Fn(usize, usize) -> f64>) = if lattice.is_ring() {
            if region != Region::All {
                return Err(Error::domain("rings have no bulk/boundary split; use the full region"));
            }
            let n = lattice.n_sites();
            let table: Vec<f64> = (0..n).map(|j| chord_distance(n, j)).collect::<Result<_>>()?;
            (
                (0..n).collect(),
                Box::new(move |a: usize, b: usize| table[a.abs_diff(b)]),
            )
        } else {
            if field != Field::Sigma {
                return Err(Error::domain("only the sigma bond field is defined on square lattices"));
            }
            let idx: Vec<usize> = match region {
                Region::All => (0..lattice.bonds.len()).collect(),
                Region::Bulk => lattice.bulk_bonds().collect(),
                Region::Boundary => lattice.boundary_bonds().collect(),
            };
            let centers: Vec<[f64; 2]> = lattice.bonds.iter().map(|b| b.center).collect();
            (
                idx,
                Box::new(move |a: usize, b: usize| crate::lattice::euclidean(centers[a], centers[b])),
            )
        };
        if indices.is_empty() {
            return Err(Error::domain("region holds no field carriers"));
        }
        let mut keyed: BTreeMap<i64, f64> = BTreeMap::new();
        let mut raw = Vec::new();
        for x in 0..indices.len() {
            for y in x..indices.len() {
                let d = dist(indices[x], indices[y]);
                keyed.entry(bin_key(d)).or_insert(d);
                raw.push((x, y, bin_key(d)));
            }
        }
        let keys: Vec<i64> = keyed.keys().cloned().collect();
        let bins: Vec<f64> = keyed.values().cloned().collect();
        let mut counts = vec![0; bins.len()];
        let pairs = raw
            .into_iter()
            .map(|(x, y, k)| {
                let b = keys.binary_search(&k).unwrap();
                counts[b] += 1;
                (x, y, b)
            })
            .collect();
        Ok(Self {
            indices,
            bins,
            pairs,
            counts,
        })
    }
}

fn field_values(lattice: &Lattice, field: Field, bits: u64, mean_n: f64) -> Vec<f64> {
    match (lattice.is_ring(), field) {
        (true, Field::Sigma) => sigma_1d_raw(lattice.n_sites(), bits, mean_n),
        (true, Field::Epsilon) => epsilon_1d_raw(lattice.n_sites(), bits, mean_n),
        (false, _) => sigma_2d_raw(lattice, bits),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelatorSeries {
    pub distances: Vec<f64>,
    pub values: Vec<f64>,
    /// Standard error per bin from shot-to-shot scatter; `None` for exact values.
    pub stderr: Option<Vec<f64>>,
    pub counts: Vec<usize>,
    pub connected: bool,
}

impl CorrelatorSeries {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("distance,value,stderr,count\n");
        for k in 0..self.len() {
            let se = self.stderr.as_ref().map_or(String::new(), |e| e[k].to_string());
            let _ = writeln!(s, "{},{},{},{}", self.distances[k], self.values[k], se, self.counts[k]);
        }
        s
    }

    /// Keep bins satisfying `keep(distance, count)`.
    pub fn filtered(&self, keep: impl Fn(f64, usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&k| keep(self.distances[k], self.counts[k])).collect();
        Self {
            distances: idx.iter().map(|&k| self.distances[k]).collect(),
            values: idx.iter().map(|&k| self.values[k]).collect(),
            stderr: self.stderr.as_ref().map(|e| idx.iter().map(|&k| e[k]).collect()),
            counts: idx.iter().map(|&k| self.counts[k]).collect(),
            connected: self.connected,
        }
    }
}

fn check_snaps(snaps: &SnapshotSet, lattice: &Lattice) -> Result<()> {
    if snaps.n_sites() != lattice.n_sites() {
        return Err(Error::Dimension {
            expected: lattice.n_sites(),
            found: snaps.n_sites(),
        });
    }
    if snaps.is_empty() {
        return Err(Error::domain("no snapshots retained"));
    }
    Ok(())
}

/// Dataset-global mean Rydberg density.
pub fn mean_density(snaps: &SnapshotSet) -> f64 {
    let total: u64 = snaps.records().iter().map(|r| r.count_ones() as u64).sum();
    total as f64 / (snaps.n_shots() * snaps.n_sites()) as f64
}

/// ⟨f_a f_b⟩ averaged over carrier pairs at each distance, with the
/// standard error of the per-shot bin averages. With `connected`, the
/// product of per-carrier means is subtracted.
pub fn two_point(snaps: &SnapshotSet, lattice: &Lattice, field: Field, region: Region, connected: bool) -> Result<CorrelatorSeries> {
    check_snaps(snaps, lattice)?;
    let car = Carriers::new(lattice, field, region)?;
    let mean_n = mean_density(snaps);
    let m = snaps.n_shots();
    let nb = car.bins.len();
    let fields: Vec<Vec<f64>> = snaps
        .records()
        .iter()
        .map(|&r| {
            let f = field_values(lattice, field, r, mean_n);
            car.indices.iter().map(|&i| f[i]).collect()
        })
        .collect();
    let nc = car.indices.len();
    let mut means = vec![0.0; nc];
    if connected {
        for f in &fields {
            for (a, v) in f.iter().enumerate() {
                means[a] += v / m as f64;
            }
        }
    }
    let mut sum = vec![0.0; nb];
    let mut sum_sq = vec![0.0; nb];
    let mut per_shot = vec![0.0; nb];
    for f in &fields {
        per_shot.iter_mut().for_each(|x| *x = 0.0);
        for &(a, b, k) in &car.pairs {
            per_shot[k] += (f[a] - means[a]) * (f[b] - means[b]);
        }
        for k in 0..nb {
            let v = per_shot[k] / car.counts[k] as f64;
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let values: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
    let stderr = (0..nb)
        .map(|k| {
            if m < 2 {
                return 0.0;
            }
            let var = ((sum_sq[k] - m as f64 * values[k] * values[k]) / (m - 1) as f64).max(0.0);
            (var / m as f64).sqrt()
        })
        .collect();
    Ok(CorrelatorSeries {
        distances: car.bins,
        values,
        stderr: Some(stderr),
        counts: car.counts,
        connected,
    })
}

/// Exact two-point function of a state, with ⟨n⟩ taken from the state.
pub fn two_point_exact(psi: &StateVector, lattice: &Lattice, field: Field, region: Region, connected: bool) -> Result<CorrelatorSeries> {
    two_point_mixture(std::slice::from_ref(psi), lattice, field, region, connected)
}

/// Exact two-point function of an equal-weight mixture of states, such as
/// the final states of a trajectory ensemble. ⟨n⟩ and the connected
/// subtraction use ensemble averages; with two or more members the
/// standard error of each bin across members is attached.
pub fn two_point_mixture(
    states: &[StateVector],
    lattice: &Lattice,
    field: Field,
    region: Region,
    connected: bool,
) -> Result<CorrelatorSeries> {
    if states.is_empty() {
        return Err(Error::domain("mixture needs at least one state"));
    }
    if let Some(psi) = states.iter().find(|p| p.n_sites() != lattice.n_sites()) {
        return Err(Error::Dimension {
            expected: lattice.n_sites(),
            found: psi.n_sites(),
        });
    }
    let car = Carriers::new(lattice, field, region)?;
    let m = states.len();
    let mean_n = states
        .iter()
        .map(|psi| {
            let d = psi.site_densities();
            d.iter().sum::<f64>() / d.len() as f64
        })
        .sum::<f64>()
        / m as f64;
    let nc = car.indices.len();
    let nb = car.bins.len();
    let mut member_bins = Vec::with_capacity(m);
    let mut one_avg = vec![0.0; nc];
    for psi in states {
        let norm = psi.norm_sqr();
        let mut pair_sum = vec![0.0; car.pairs.len()];
        for (k, a) in psi.amps.iter().enumerate() {
            let p = a.norm_sqr() / norm;
            if p == 0.0 {
                continue;
            }
            let f = field_values(lattice, field, psi.basis.state(k), mean_n);
            let g: Vec<f64> = car.indices.iter().map(|&i| f[i]).collect();
            for (q, &(x, y, _)) in car.pairs.iter().enumerate() {
                pair_sum[q] += p * g[x] * g[y];
            }
            for x in 0..nc {
                one_avg[x] += p * g[x] / m as f64;
            }
        }
        let mut bins = vec![0.0; nb];
        for (q, &(_, _, b)) in car.pairs.iter().enumerate() {
            bins[b] += pair_sum[q] / car.counts[b] as f64;
        }
        member_bins.push(bins);
    }
    let mut shift = vec![0.0; nb];
    if connected {
        for &(x, y, b) in &car.pairs {
            shift[b] += one_avg[x] * one_avg[y] / car.counts[b] as f64;
        }
    }
    let values: Vec<f64> = (0..nb)
        .map(|b| member_bins.iter().map(|v| v[b]).sum::<f64>() / m as f64 - shift[b])
        .collect();
    let stderr = (m >= 2).then(|| {
        (0..nb)
            .map(|b| {
                let mean = values[b] + shift[b];
                let var = member_bins.iter().map(|v| (v[b] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
                (var / m as f64).sqrt()
            })
            .collect()
    });
    Ok(CorrelatorSeries {
        distances: car.bins,
        values,
        stderr,
        counts: car.counts,
        connected,
    })
}

/// Exact ⟨σ_i σ_j⟩ matrix on a ring, for translation-invariance checks.
pub fn sigma_pair_matrix_exact(psi: &StateVector, lattice: &Lattice) -> Result<Vec<Vec<f64>>> {
    require_ring(lattice)?;
    let n = lattice.n_sites();
    let dens = psi.site_densities();
    let mean_n = dens.iter().sum::<f64>() / n as f64;
    let norm = psi.norm_sqr();
    let mut out = vec![vec![0.0; n]; n];
    for (k, a) in psi.amps.iter().enumerate() {
        let p = a.norm_sqr() / norm;
        if p == 0.0 {
            continue;
        }
        let f = sigma_1d_raw(n, psi.basis.state(k), mean_n);
        for i in 0..n {
            for j in 0..n {
                out[i][j] += p * f[i] * f[j];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

fn region_carriers(lattice: &Lattice, field: Field, region: Region) -> Result<Vec<usize>> {
    Ok(Carriers::new(lattice, field, region)?.indices)
}

/// ⟨Ô⟩ = (1/N_c²) Σ_{a,b} ⟨f_a f_b⟩ over the region's carriers, i.e. the
/// shot average of (Σ_a f_a)²/N_c².
pub fn order_parameter(snaps: &SnapshotSet, lattice: &Lattice, field: Field, region: Region) -> Result<Estimate> {
    check_snaps(snaps, lattice)?;
    let idx = region_carriers(lattice, field, region)?;
    let mean_n = mean_density(snaps);
    let nc = idx.len() as f64;
    let per: Vec<f64> = snaps
        .records()
        .iter()
        .map(|&r| {
            let f = field_values(lattice, field, r, mean_n);
            let s: f64 = idx.iter().map(|&i| f[i]).sum();
            s * s / (nc * nc)
        })
        .collect();
    Ok(mean_and_stderr(&per))
}

pub fn order_parameter_exact(psi: &StateVector, lattice: &Lattice, field: Field, region: Region) -> Result<f64> {
    let idx = region_carriers(lattice, field, region)?;
    let dens = psi.site_densities();
    let mean_n = dens.iter().sum::<f64>() / dens.len() as f64;
    let nc = idx.len() as f64;
    Ok(psi.expect_diagonal(|bits| {
        let f = field_values(lattice, field, bits, mean_n);
        let s: f64 = idx.iter().map(|&i| f[i]).sum();
        s * s / (nc * nc)
    }))
}

fn mean_and_stderr(x: &[f64]) -> Estimate {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let stderr = if x.len() > 1 {
        (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    Estimate { value: mean, stderr }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub per_site: Vec<f64>,
    pub per_site_stderr: Vec<f64>,
    pub global: Estimate,
}

pub fn rydberg_density(snaps: &SnapshotSet) -> Result<DensityEstimate> {
    if snaps.is_empty() {
        return Err(Error::domain("no snapshots retained"));
    }
    let m = snaps.n_shots() as f64;
    let n = snaps.n_sites();
    let per_site: Vec<f64> = (0..n)
        .map(|i| snaps.records().iter().filter(|&&r| (r >> i) & 1 == 1).count() as f64 / m)
        .collect();
    let per_site_stderr = per_site.iter().map(|p| (p * (1.0 - p) / m).sqrt()).collect();
    let per_shot: Vec<f64> = snaps
        .records()
        .iter()
        .map(|r| r.count_ones() as f64 / n as f64)
        .collect();
    Ok(DensityEstimate {
        per_site,
        per_site_stderr,
        global: mean_and_stderr(&per_shot),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::BasisSpace;
    use crate::lattice::{build_ring, build_square};
    use crate::measurement::Provenance;
    use num_complex::Complex64;

    fn neel(n: usize, offset: usize) -> u64 {
        (0..n).filter(|i| i % 2 == offset).fold(0, |m, i| m | (1 << i))
    }

    fn checkerboard(l: &Lattice, offset: usize) -> u64 {
        (0..l.n_sites())
            .filter(|&i| {
                let (x, y) = l.grid_position(i).unwrap();
                (x + y) % 2 == offset
            })
            .fold(0, |m, i| m | (1 << i))
    }

    fn set(n: usize, recs: Vec<u64>) -> SnapshotSet {
        SnapshotSet::new(n, recs, "h".into(), Provenance::default()).unwrap()
    }

    #[test]
    fn sigma_1d_cases() {
        let ring = build_ring(6, 1.0).unwrap();
        assert!(sigma_1d(&ring, neel(6, 0), 0.5).unwrap().iter().all(|&x| x == 0.5));
        assert!(sigma_1d(&ring, neel(6, 1), 0.5).unwrap().iter().all(|&x| x == -0.5));
        assert!(sigma_1d(&ring, 0, 0.0).unwrap().iter().all(|&x| x == 0.0));
        let sq = build_square(2, 2, 1.0).unwrap();
        assert!(sigma_1d(&sq, 0, 0.0).is_err());
    }

    #[test]
    fn epsilon_cases() {
        let ring = build_ring(6, 1.0).unwrap();
        assert!(epsilon_1d(&ring, 0, 0.0).unwrap().iter().all(|&x| x == 0.0));
        assert!(epsilon_1d(&ring, neel(6, 0), 0.5).unwrap().iter().all(|&x| x == 0.5));
        assert!(epsilon_1d(&ring, 0b111111, 1.0).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sigma_2d_cases() {
        let sq = build_square(4, 4, 1.0).unwrap();
        assert!(sigma_2d_bonds(&sq, checkerboard(&sq, 0)).unwrap().iter().all(|&x| x == 1.0));
        assert!(sigma_2d_bonds(&sq, checkerboard(&sq, 1)).unwrap().iter().all(|&x| x == -1.0));
        assert!(sigma_2d_bonds(&sq, 0).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn neel_ensemble_correlator() {
        let ring = build_ring(24, 1.0).unwrap();
        let s = set(24, vec![neel(24, 0), neel(24, 1), neel(24, 0), neel(24, 1)]);
        let c = two_point(&s, &ring, Field::Sigma, Region::All, false).unwrap();
        assert_eq!(c.len(), 13);
        assert!(c.values.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let o = order_parameter(&s, &ring, Field::Sigma, Region::All).unwrap();
        assert!((o.value - 0.25).abs() < 1e-15);
        let d = rydberg_density(&s).unwrap();
        assert_eq!(d.global.value, 0.5);
    }

    #[test]
    fn ground_product_state_is_zero() {
        let ring = build_ring(5, 1.0).unwrap();
        let psi = StateVector::all_ground(BasisSpace::full(5).unwrap());
        let c = two_point_exact(&psi, &ring, Field::Sigma, Region::All, false).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert_eq!(order_parameter_exact(&psi, &ring, Field::Sigma, Region::All).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_bulk_order() {
        let sq = build_square(4, 4, 1.0).unwrap();
        let s = set(16, vec![checkerboard(&sq, 0); 3]);
        for region in [Region::All, Region::Bulk, Region::Boundary] {
            let o = order_parameter(&s, &sq, Field::Sigma, region).unwrap();
            assert_eq!(o.value, 1.0);
        }
    }

    #[test]
    fn chord_bins_merge_mirror_distances() {
        let ring = build_ring(8, 1.0).unwrap();
        let car = Carriers::new(&ring, Field::Sigma, Region::All).unwrap();
        assert_eq!(car.bins.len(), 5);
        assert_eq!(car.counts.iter().sum::<usize>(), 8 * 9 / 2);
        assert_eq!(car.counts[0], 8);
    }

    #[test]
    fn snapshot_estimator_matches_exact_for_basis_state() {
        let ring = build_ring(4, 1.0).unwrap();
        let basis = BasisSpace::full(4).unwrap();
        let mut amps = vec![Complex64::new(0.0, 0.0); 16];
        amps[0b0011] = Complex64::new(1.0, 0.0);
        let psi = StateVector::new(amps, basis).unwrap();
        let exact = two_point_exact(&psi, &ring, Field::Epsilon, Region::All, false).unwrap();
        let est = two_point(&set(4, vec![0b0011; 5]), &ring, Field::Epsilon, Region::All, false).unwrap();
        for k in 0..exact.len() {
            assert!((exact.values[k] - est.values[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_region_rejected() {
        let ring = build_ring(4, 1.0).unwrap();
        assert!(two_point(&set(4, vec![0]), &ring, Field::Sigma, Region::Bulk, false).is_err());
        let sq = build_square(2, 2, 1.0).unwrap();
        assert!(order_parameter(&set(4, vec![0]), &sq, Field::Sigma, Region::Bulk).is_err());
    }
}
