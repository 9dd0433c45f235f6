//! Ring and square-lattice geometries, pairwise distances, bulk/boundary
//! bond tags, and static / thermal disorder sampling.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Smallest multiplicative factor allowed on a disordered coupling.
pub const MIN_V_FACTOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Ring,
    Square { nx: usize, ny: usize },
}

/// Nearest-neighbour bond. `a` is the site whose coordinates fix the parity
/// prefactor of the bond field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub center: [f64; 2],
    pub parity: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub geometry: Geometry,
    pub spacing: f64,
    pub coords: Vec<[f64; 2]>,
    pub bonds: Vec<Bond>,
    /// Per bond; always false on rings.
    pub boundary_mask: Vec<bool>,
}

fn parity_of(k: usize) -> i8 {
    if k % 2 == 0 {
        1
    } else {
        -1
    }
}

fn midpoint(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]
}

pub fn euclidean(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Sites on a circle of radius `spacing / (2 sin(π/N))`, so that neighbouring
/// sites sit exactly one spacing apart.
pub fn build_ring(n_sites: usize, spacing: f64) -> Result<Lattice> {
    if n_sites < 3 {
        return Err(Error::InvalidGeometry(format!(
            "a ring needs at least 3 sites, got {n_sites}"
        )));
    }
    if !(spacing > 0.0) {
        return Err(Error::InvalidGeometry(format!("spacing must be positive, got {spacing}")));
    }
    let radius = spacing / (2.0 * (PI / n_sites as f64).sin());
    let coords: Vec<[f64; 2]> = (0..n_sites)
        .map(|i| {
            let th = 2.0 * PI * i as f64 / n_sites as f64;
            [radius * th.cos(), radius * th.sin()]
        })
        .collect();
    let bonds: Vec<Bond> = (0..n_sites)
        .map(|i| {
            let j = (i + 1) % n_sites;
            Bond {
                a: i,
                b: j,
                center: midpoint(coords[i], coords[j]),
                parity: parity_of(i),
            }
        })
        .collect();
    let boundary_mask = vec![false; bonds.len()];
    Ok(Lattice {
        geometry: Geometry::Ring,
        spacing,
        coords,
        bonds,
        boundary_mask,
    })
}

/// Open `nx × ny` grid; site index is `y * nx + x`.
pub fn build_square(nx: usize, ny: usize, spacing: f64) -> Result<Lattice> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidGeometry(format!(
            "square lattice needs nx, ny >= 2, got {nx}x{ny}"
        )));
    }
    if !(spacing > 0.0) {
        return Err(Error::InvalidGeometry(format!("spacing must be positive, got {spacing}")));
    }
    let coords: Vec<[f64; 2]> = (0..nx * ny)
        .map(|i| [(i % nx) as f64 * spacing, (i / nx) as f64 * spacing])
        .collect();
    let on_perimeter = |i: usize| {
        let (x, y) = (i % nx, i / nx);
        x == 0 || y == 0 || x == nx - 1 || y == ny - 1
    };
    let mut bonds = Vec::with_capacity(2 * nx * ny);
    let mut boundary_mask = Vec::with_capacity(2 * nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let i = y * nx + x;
            let mut push = |j: usize| {
                bonds.push(Bond {
                    a: i,
                    b: j,
                    center: midpoint(coords[i], coords[j]),
                    parity: parity_of(x + y),
                });
                boundary_mask.push(on_perimeter(i) && on_perimeter(j));
            };
            if x + 1 < nx {
                push(i + 1);
            }
            if y + 1 < ny {
                push(i + nx);
            }
        }
    }
    Ok(Lattice {
        geometry: Geometry::Square { nx, ny },
        spacing,
        coords,
        bonds,
        boundary_mask,
    })
}

/// Conformal separation `(N/π) sin(πj/N)` on a periodic chain, in units of
/// the lattice spacing.
pub fn chord_distance(n_sites: usize, j: usize) -> Result<f64> {
    if n_sites == 0 || j > n_sites {
        return Err(Error::domain(format!(
            "separation {j} out of range for a ring of {n_sites} sites"
        )));
    }
    let n = n_sites as f64;
    Ok(n / PI * (PI * j as f64 / n).sin())
}

impl Lattice {
    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn is_ring(&self) -> bool {
        self.geometry == Geometry::Ring
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(self.coords[i], self.coords[j])
    }

    /// Grid coordinates of a square-lattice site.
    pub fn grid_position(&self, i: usize) -> Option<(usize, usize)> {
        match self.geometry {
            Geometry::Square { nx, .. } => Some((i % nx, i / nx)),
            Geometry::Ring => None,
        }
    }

    pub fn bulk_bonds(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.bonds.len()).filter(|&b| !self.boundary_mask[b])
    }

    pub fn boundary_bonds(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.bonds.len()).filter(|&b| self.boundary_mask[b])
    }

    /// All site pairs `(i, j)`, `i < j`, within Euclidean distance `radius`.
    pub fn pairs_within(&self, radius: f64) -> Vec<(usize, usize)> {
        let n = self.n_sites();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.distance(i, j) <= radius * (1.0 + 1e-12) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("lattice serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Thermal motion parameters: initial position spread, velocity spread
/// (length per μs), and free-flight time before/through the interaction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThermalMotion {
    pub sigma_r: f64,
    pub sigma_v: f64,
    pub t_evolve: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderSample {
    pub displaced_coords: Vec<[f64; 2]>,
    /// Row-major `n × n`, symmetric, unit diagonal.
    pub v_scale_factors: Vec<f64>,
    n_sites: usize,
}

impl DisorderSample {
    pub fn identity(lattice: &Lattice) -> Self {
        let n = lattice.n_sites();
        Self {
            displaced_coords: lattice.coords.clone(),
            v_scale_factors: vec![1.0; n * n],
            n_sites: n,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn factor(&self, i: usize, j: usize) -> f64 {
        self.v_scale_factors[i * self.n_sites + j]
    }

    /// Factors for the unordered pairs `i < j` in row-major order.
    pub fn pair_factors(&self) -> Vec<f64> {
        let n = self.n_sites;
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.factor(i, j));
            }
        }
        out
    }
}

/// Draw one disorder realization: i.i.d. Gaussian multiplicative factors on
/// every coupling (mean 1, relative std `static_v_sigma`, truncated below at
/// [`MIN_V_FACTOR`]) and per-axis displacements `N(0, σ_r) + N(0, σ_v)·t`.
pub fn sample_disorder(
    lattice: &Lattice,
    static_v_sigma: f64,
    thermal: ThermalMotion,
    seed: u64,
) -> Result<DisorderSample> {
    let ThermalMotion {
        sigma_r,
        sigma_v,
        t_evolve,
    } = thermal;
    for (name, v) in [
        ("static_v_sigma", static_v_sigma),
        ("sigma_r", sigma_r),
        ("sigma_v", sigma_v),
        ("t_evolve", t_evolve),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::domain(format!("{name} must be a finite value >= 0, got {v}")));
        }
    }
    let n = lattice.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut factors = vec![1.0; n * n];
    if static_v_sigma > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                let f = (1.0 + static_v_sigma * std_normal.sample(&mut rng)).max(MIN_V_FACTOR);
                factors[i * n + j] = f;
                factors[j * n + i] = f;
            }
        }
    }

    let mut displaced = lattice.coords.clone();
    if sigma_r > 0.0 || (sigma_v > 0.0 && t_evolve > 0.0) {
        for p in displaced.iter_mut() {
            for c in p.iter_mut() {
                let dr = sigma_r * std_normal.sample(&mut rng);
                let dv = sigma_v * std_normal.sample(&mut rng);
                *c += dr + dv * t_evolve;
            }
        }
    }

    Ok(DisorderSample {
        displaced_coords: displaced,
        v_scale_factors: factors,
        n_sites: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_radius_and_neighbour_spacing() {
        let ring = build_ring(24, 1.0).unwrap();
        let r = 1.0 / (2.0 * (PI / 24.0).sin());
        assert!((r - 3.830_648_7).abs() < 1e-6);
        for p in &ring.coords {
            assert!((p[0].hypot(p[1]) - r).abs() < 1e-12);
        }
        for b in &ring.bonds {
            assert!((ring.distance(b.a, b.b) - 1.0).abs() < 1e-12);
        }
        assert_eq!(ring.bonds.len(), 24);
    }

    #[test]
    fn ring_of_four_is_inscribed_square() {
        let ring = build_ring(4, 1.0).unwrap();
        for p in &ring.coords {
            assert!((p[0].hypot(p[1]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn small_ring_rejected() {
        assert!(matches!(build_ring(2, 1.0), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn ring_rotation_invariance() {
        let n = 17;
        let ring = build_ring(n, 1.0).unwrap();
        for j in 0..n {
            let d0 = ring.distance(0, j);
            for i in 0..n {
                assert!((ring.distance(i, (i + j) % n) - d0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn square_bond_counts() {
        let sq = build_square(3, 3, 1.0).unwrap();
        assert_eq!(sq.n_sites(), 9);
        assert_eq!(sq.bonds.len(), 12);
        assert_eq!(sq.boundary_bonds().count(), 8);
        let sq7 = build_square(7, 7, 1.0).unwrap();
        assert_eq!(sq7.n_sites(), 49);
        assert_eq!(sq7.bonds.len(), 84);
        assert!(matches!(build_square(1, 5, 1.0), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn square_bonds_unique_and_nearest() {
        let sq = build_square(5, 4, 1.0).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for b in &sq.bonds {
            let key = (b.a.min(b.b), b.a.max(b.b));
            assert!(seen.insert(key), "duplicate bond {key:?}");
            assert!((sq.distance(b.a, b.b) - 1.0).abs() < 1e-12);
        }
        // brute-force: every pair at unit distance is a bond
        assert_eq!(sq.pairs_within(1.0).len(), sq.bonds.len());
    }

    #[test]
    fn boundary_classifier_matches_brute_force() {
        for l in 2..9 {
            let sq = build_square(l, l, 1.0).unwrap();
            let max = (l - 1) as f64;
            let on_edge = |p: [f64; 2]| p[0] == 0.0 || p[1] == 0.0 || p[0] == max || p[1] == max;
            let brute: Vec<bool> = sq
                .bonds
                .iter()
                .map(|b| on_edge(sq.coords[b.a]) && on_edge(sq.coords[b.b]))
                .collect();
            assert_eq!(brute, sq.boundary_mask);
            assert_eq!(sq.boundary_bonds().count(), 4 * (l - 1));
        }
    }

    #[test]
    fn square_parity_from_first_site() {
        let sq = build_square(3, 3, 1.0).unwrap();
        for b in &sq.bonds {
            let (x, y) = sq.grid_position(b.a).unwrap();
            assert_eq!(b.parity, if (x + y) % 2 == 0 { 1 } else { -1 });
            assert!(b.b > b.a);
        }
    }

    #[test]
    fn chord_distance_values() {
        assert!((chord_distance(24, 12).unwrap() - 24.0 / PI).abs() < 1e-12);
        assert_eq!(chord_distance(24, 0).unwrap(), 0.0);
        assert!((chord_distance(24, 6).unwrap() - 24.0 / (PI * 2f64.sqrt())).abs() < 1e-12);
        assert!((chord_distance(24, 6).unwrap() - 5.4019).abs() < 1e-4);
        assert!(chord_distance(24, 25).is_err());
        for j in 0..=24 {
            let a = chord_distance(24, j).unwrap();
            let b = chord_distance(24, 24 - j).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_disorder_is_identity() {
        let ring = build_ring(24, 1.0).unwrap();
        let s = sample_disorder(&ring, 0.0, ThermalMotion::default(), 99).unwrap();
        assert_eq!(s, DisorderSample::identity(&ring));
    }

    #[test]
    fn static_disorder_statistics() {
        let ring = build_ring(24, 1.0).unwrap();
        let mut all = Vec::new();
        let mut seed = 0;
        while all.len() < 10_000 {
            let s = sample_disorder(&ring, 0.26, ThermalMotion::default(), seed).unwrap();
            all.extend(s.pair_factors());
            seed += 1;
        }
        all.truncate(10_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
        let rel = var.sqrt() / mean;
        assert!((rel - 0.26).abs() < 0.03, "relative std {rel}");
        assert!(all.iter().all(|&f| f >= MIN_V_FACTOR));
    }

    #[test]
    fn disorder_is_deterministic() {
        let sq = build_square(4, 4, 1.0).unwrap();
        let th = ThermalMotion {
            sigma_r: 0.05,
            sigma_v: 0.02,
            t_evolve: 1.5,
        };
        let a = sample_disorder(&sq, 0.14, th, 7).unwrap();
        let b = sample_disorder(&sq, 0.14, th, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_disorder(&sq, 0.14, th, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negative_disorder_rejected() {
        let ring = build_ring(6, 1.0).unwrap();
        assert!(sample_disorder(&ring, -0.1, ThermalMotion::default(), 0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let sq = build_square(3, 2, 1.0).unwrap();
        let json = sq.to_json().unwrap();
        assert!(json.contains("\"boundary_mask\""));
        assert_eq!(Lattice::from_json(&json).unwrap(), sq);
        assert_eq!(sq.content_hash().len(), 64);
    }
}
