//! Occupation-basis snapshots: Born sampling, detection errors and their
//! inversion from calibration data, blockade post-selection, atom loss, and a
//! plain-text file format.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryResult;
use crate::hamiltonian::StateVector;
use crate::lattice::Lattice;
use crate::{Error, Result};

const FORMAT_TAG: &str = "rydcrit-snapshots";

fn shot_rng(seed: u64, shot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    /// Probability that a ground-state atom is correctly read as ground.
    pub eta0: f64,
    /// Probability that a Rydberg atom is read as ground.
    pub eps_det: f64,
    pub p_pi: Option<f64>,
}

impl DetectionModel {
    pub fn perfect() -> Self {
        Self {
            eta0: 1.0,
            eps_det: 0.0,
            p_pi: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta0) {
            return Err(Error::domain(format!("eta0 = {} outside [0, 1]", self.eta0)));
        }
        if !self.eps_det.is_finite() {
            return Err(Error::domain("eps_det must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub detection: Option<DetectionModel>,
    pub detection_seed: Option<u64>,
    pub postselect_radius: Option<f64>,
    /// Shots drawn from each trajectory; above 1 the shots are correlated.
    pub shots_per_trajectory: Option<usize>,
    /// Blockade truncation radius of the sampled states, if any.
    pub truncation_radius: Option<f64>,
    pub hole_probability: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    n_sites: usize,
    /// One bitstring per retained shot, site i in bit i.
    records: Vec<u64>,
    pub lattice_hash: String,
    pub provenance: Provenance,
    /// Over the shots as originally drawn: true where the shot is retained.
    pub postselect_mask: Option<Vec<bool>>,
}

impl SnapshotSet {
    pub fn new(n_sites: usize, records: Vec<u64>, lattice_hash: String, provenance: Provenance) -> Result<Self> {
        if n_sites == 0 || n_sites > 64 {
            return Err(Error::Capacity {
                what: "snapshot sites".into(),
                limit: 64,
                requested: n_sites,
            });
        }
        if n_sites < 64 {
            if let Some(r) = records.iter().find(|&&r| r >> n_sites != 0) {
                return Err(Error::domain(format!("record {r:#x} has bits beyond site {n_sites}")));
            }
        }
        Ok(Self {
            n_sites,
            records,
            lattice_hash,
            provenance,
            postselect_mask: None,
        })
    }

    /// From 0/1 rows.
    pub fn from_rows(rows: &[Vec<u8>], lattice_hash: String, provenance: Provenance) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        let mut records = Vec::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: row.len(),
                });
            }
            let mut bits = 0u64;
            for (i, &b) in row.iter().enumerate() {
                match b {
                    0 => {}
                    1 => bits |= 1 << i,
                    _ => return Err(Error::domain(format!("row {k} holds {b}, expected 0 or 1"))),
                }
            }
            records.push(bits);
        }
        Self::new(n, records, lattice_hash, provenance)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_shots(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[u64] {
        &self.records
    }

    #[inline]
    pub fn get(&self, shot: usize, site: usize) -> u8 {
        ((self.records[shot] >> site) & 1) as u8
    }

    pub fn row(&self, shot: usize) -> Vec<u8> {
        (0..self.n_sites).map(|i| self.get(shot, i)).collect()
    }

    /// Same metadata, a chosen subset (with repetition) of shots. Used by the
    /// bootstrap.
    pub fn resampled(&self, indices: &[usize]) -> Self {
        Self {
            n_sites: self.n_sites,
            records: indices.iter().map(|&k| self.records[k]).collect(),
            lattice_hash: self.lattice_hash.clone(),
            provenance: self.provenance.clone(),
            postselect_mask: None,
        }
    }

    pub fn with_records(&self, records: Vec<u64>) -> Self {
        Self {
            records,
            ..self.clone()
        }
    }

    pub fn rejection_fraction(&self) -> Option<f64> {
        self.postselect_mask.as_ref().map(|m| {
            if m.is_empty() {
                0.0
            } else {
                m.iter().filter(|&&k| !k).count() as f64 / m.len() as f64
            }
        })
    }

    pub fn to_file_string(&self, encoding: Encoding) -> Result<String> {
        let header = FileHeader {
            format: FORMAT_TAG.into(),
            version: 1,
            encoding,
            n_sites: self.n_sites,
            n_shots: self.records.len(),
            lattice_hash: self.lattice_hash.clone(),
            provenance: self.provenance.clone(),
            postselect_mask: self.postselect_mask.clone(),
        };
        let mut s = serde_json::to_string(&header)?;
        s.push('\n');
        let width = self.n_sites.div_ceil(4);
        for &r in &self.records {
            match encoding {
                Encoding::Csv => {
                    for i in 0..self.n_sites {
                        if i > 0 {
                            s.push(',');
                        }
                        s.push(if (r >> i) & 1 == 1 { '1' } else { '0' });
                    }
                }
                Encoding::PackedHex => {
                    let _ = write!(s, "{r:0width$x}");
                }
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| Error::Parse("empty snapshot file".into()))?;
        let header: FileHeader = serde_json::from_str(first)?;
        if header.format != FORMAT_TAG {
            return Err(Error::Parse(format!("not a snapshot file (format {:?})", header.format)));
        }
        let mut records = Vec::with_capacity(header.n_shots);
        for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let line = line.trim();
            let bits = match header.encoding {
                Encoding::Csv => {
                    let mut bits = 0u64;
                    let mut count = 0;
                    for (i, c) in line.split(',').enumerate() {
                        match c.trim() {
                            "0" => {}
                            "1" => bits |= 1 << i,
                            other => return Err(Error::Parse(format!("shot {k}: bad entry {other:?}"))),
                        }
                        count += 1;
                    }
                    if count != header.n_sites {
                        return Err(Error::Parse(format!("shot {k}: {count} entries, expected {}", header.n_sites)));
                    }
                    bits
                }
                Encoding::PackedHex => u64::from_str_radix(line, 16).map_err(|e| Error::Parse(format!("shot {k}: {e}")))?,
            };
            records.push(bits);
        }
        if records.len() != header.n_shots {
            return Err(Error::Parse(format!(
                "header promises {} shots, body has {}",
                header.n_shots,
                records.len()
            )));
        }
        let mut set = Self::new(header.n_sites, records, header.lattice_hash, header.provenance)?;
        set.postselect_mask = header.postselect_mask;
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    Csv,
    PackedHex,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    encoding: Encoding,
    n_sites: usize,
    n_shots: usize,
    lattice_hash: String,
    provenance: Provenance,
    postselect_mask: Option<Vec<bool>>,
}

fn cumulative(psi: &StateVector) -> Result<Vec<f64>> {
    let n2 = psi.norm_sqr();
    if (n2 - 1.0).abs() > 1e-8 {
        return Err(Error::domain(format!("sampling needs a normalized state (norm² = {n2})")));
    }
    let mut acc = 0.0;
    Ok(psi
        .amps
        .iter()
        .map(|a| {
            acc += a.norm_sqr();
            acc
        })
        .collect())
}

fn draw(cdf: &[f64], psi: &StateVector, rng: &mut ChaCha8Rng) -> u64 {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
    psi.basis.state(k)
}

/// `m` independent Born-rule shots; shot k uses stream k under `seed`.
pub fn sample_snapshots(psi: &StateVector, m: usize, seed: u64, lattice_hash: &str) -> Result<SnapshotSet> {
    if m == 0 {
        return Err(Error::domain("need at least one shot"));
    }
    let cdf = cumulative(psi)?;
    let records: Vec<u64> = (0..m as u64)
        .into_par_iter()
        .map(|k| draw(&cdf, psi, &mut shot_rng(seed, k)))
        .collect();
    let provenance = Provenance {
        source: "state".into(),
        seed,
        truncation_radius: match psi.basis.truncation() {
            crate::hamiltonian::Truncation::Blockade { radius } => Some(radius),
            crate::hamiltonian::Truncation::Full => None,
        },
        ..Default::default()
    };
    SnapshotSet::new(psi.n_sites(), records, lattice_hash.into(), provenance)
}

/// Shots from a trajectory ensemble, `shots_per_trajectory` per final state
/// (1 gives independent shots).
pub fn sample_ensemble(
    results: &[TrajectoryResult],
    shots_per_trajectory: usize,
    seed: u64,
    lattice_hash: &str,
) -> Result<SnapshotSet> {
    if results.is_empty() || shots_per_trajectory == 0 {
        return Err(Error::domain("need at least one trajectory and one shot per trajectory"));
    }
    let cdfs: Vec<Vec<f64>> = results.iter().map(|r| cumulative(&r.final_state)).collect::<Result<_>>()?;
    let total = (results.len() * shots_per_trajectory) as u64;
    let records: Vec<u64> = (0..total)
        .into_par_iter()
        .map(|k| {
            let t = k as usize / shots_per_trajectory;
            draw(&cdfs[t], &results[t].final_state, &mut shot_rng(seed, k))
        })
        .collect();
    let provenance = Provenance {
        source: "trajectory-ensemble".into(),
        seed,
        shots_per_trajectory: Some(shots_per_trajectory),
        ..Default::default()
    };
    if shots_per_trajectory > 1 {
        log::warn!("{shots_per_trajectory} shots per trajectory: shots are correlated");
    }
    SnapshotSet::new(results[0].final_state.n_sites(), records, lattice_hash.into(), provenance)
}

/// Ground atoms read as Rydberg with probability 1 − η₀, Rydberg atoms read
/// as ground with probability eps_det (clamped to [0, 1]).
pub fn apply_detection_errors(snaps: &SnapshotSet, model: &DetectionModel, seed: u64) -> Result<SnapshotSet> {
    model.validate()?;
    let p_fp = 1.0 - model.eta0;
    let p_fn = model.eps_det.clamp(0.0, 1.0);
    let n = snaps.n_sites;
    let records: Vec<u64> = snaps
        .records
        .par_iter()
        .enumerate()
        .map(|(k, &r)| {
            let mut rng = shot_rng(seed, k as u64);
            let mut out = r;
            for i in 0..n {
                let u: f64 = rng.random();
                if (r >> i) & 1 == 1 {
                    if u < p_fn {
                        out &= !(1 << i);
                    }
                } else if u < p_fp {
                    out |= 1 << i;
                }
            }
            out
        })
        .collect();
    let mut out = snaps.with_records(records);
    out.provenance.detection = Some(*model);
    out.provenance.detection_seed = Some(seed);
    Ok(out)
}

/// Calibration observables predicted by the detection model: the ground
/// fraction after one π pulse (n_g1) and after a 2π sequence (n_g2).
pub fn forward_detection(eta0: f64, p_pi: f64, eps_det: f64) -> (f64, f64) {
    let q = 1.0 - p_pi;
    let n_g1 = eta0 * q + eps_det * p_pi;
    let n_g2 = eta0 * (p_pi * p_pi + q * q) + 2.0 * eps_det * p_pi * q;
    (n_g1, n_g2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionInference {
    pub p_pi: f64,
    pub eps_det: f64,
    /// False when the solved p_pi falls outside [0, 1].
    pub p_in_range: bool,
    pub p_pi_std: Option<f64>,
    pub eps_det_std: Option<f64>,
}

/// Closed-form inversion of [`forward_detection`].
pub fn infer_detection_error(eta0: f64, n_g1: f64, n_g2: f64) -> Result<DetectionInference> {
    for (name, v) in [("eta0", eta0), ("n_g1", n_g1), ("n_g2", n_g2)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let denom = 2.0 * (eta0 - n_g1);
    if denom.abs() < 1e-15 {
        return Err(Error::domain("eta0 equals n_g1: detection inversion is degenerate"));
    }
    let p = (n_g2 + eta0 - 2.0 * n_g1) / denom;
    if p == 0.0 {
        return Err(Error::domain("inferred pi-pulse fidelity is zero"));
    }
    let eps = (n_g1 - eta0 * (1.0 - p)) / p;
    let p_in_range = (0.0..=1.0).contains(&p);
    if !p_in_range {
        log::warn!("inferred pi-pulse fidelity {p} outside [0, 1]");
    }
    Ok(DetectionInference {
        p_pi: p,
        eps_det: eps,
        p_in_range,
        p_pi_std: None,
        eps_det_std: None,
    })
}

/// As [`infer_detection_error`], with standard deviations propagated from
/// independent input uncertainties by central finite differences.
pub fn infer_detection_error_with_uncertainty(
    values: (f64, f64, f64),
    stds: (f64, f64, f64),
) -> Result<DetectionInference> {
    let (e, a, b) = values;
    let mut base = infer_detection_error(e, a, b)?;
    let x = [e, a, b];
    let s = [stds.0, stds.1, stds.2];
    let (mut var_p, mut var_e) = (0.0, 0.0);
    for k in 0..3 {
        if s[k] == 0.0 {
            continue;
        }
        let h = 1e-6;
        let mut up = x;
        let mut dn = x;
        up[k] += h;
        dn[k] -= h;
        let f = |v: [f64; 3]| -> (f64, f64) {
            let p = (v[2] + v[0] - 2.0 * v[1]) / (2.0 * (v[0] - v[1]));
            (p, (v[1] - v[0] * (1.0 - p)) / p)
        };
        let (pu, eu) = f(up);
        let (pd, ed) = f(dn);
        var_p += ((pu - pd) / (2.0 * h) * s[k]).powi(2);
        var_e += ((eu - ed) / (2.0 * h) * s[k]).powi(2);
    }
    base.p_pi_std = Some(var_p.sqrt());
    base.eps_det_std = Some(var_e.sqrt());
    Ok(base)
}

/// Drop every shot with two detected excitations within `radius`. The mask
/// composes, so repeated application is a no-op.
pub fn postselect_blockade(snaps: &SnapshotSet, lattice: &Lattice, radius: f64) -> Result<SnapshotSet> {
    if !(radius > 0.0) {
        return Err(Error::domain("post-selection radius must be positive"));
    }
    if lattice.n_sites() != snaps.n_sites {
        return Err(Error::Dimension {
            expected: snaps.n_sites,
            found: lattice.n_sites(),
        });
    }
    let pairs: Vec<u64> = lattice
        .pairs_within(radius)
        .into_iter()
        .map(|(i, j)| (1u64 << i) | (1u64 << j))
        .collect();
    let keep: Vec<bool> = snaps
        .records
        .iter()
        .map(|&r| !pairs.iter().any(|&m| r & m == m))
        .collect();
    let records: Vec<u64> = snaps
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&r, _)| r)
        .collect();
    let mask = match &snaps.postselect_mask {
        None => keep,
        Some(prev) => {
            let mut it = keep.into_iter();
            prev.iter().map(|&p| p && it.next().unwrap()).collect()
        }
    };
    let mut out = snaps.with_records(records);
    out.postselect_mask = Some(mask);
    out.provenance.postselect_radius = Some(radius);
    Ok(out)
}

/// Independent per-site atom loss before the ramp.
pub fn sample_holes(n_sites: usize, loss_probability: f64, seed: u64, stream: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&loss_probability) {
        return Err(Error::domain("loss probability outside [0, 1]"));
    }
    let mut rng = shot_rng(seed, stream);
    Ok((0..n_sites).map(|_| rng.random::<f64>() < loss_probability).collect())
}

pub fn hole_mask_bits(lost: &[bool]) -> u64 {
    lost.iter().enumerate().filter(|(_, &l)| l).fold(0, |m, (i, _)| m | (1 << i))
}

/// Positions of the atoms that remain.
pub fn remaining_positions(lattice: &Lattice, lost: &[bool]) -> Vec<[f64; 2]> {
    lattice
        .coords
        .iter()
        .zip(lost)
        .filter(|(_, &l)| !l)
        .map(|(c, _)| *c)
        .collect()
}

/// Lift a bitstring over the remaining atoms back onto the full lattice;
/// lost sites read as detected Rydberg (an empty trap images like one).
pub fn expand_with_holes(bits: u64, lost: &[bool]) -> u64 {
    let mut out = 0u64;
    let mut k = 0;
    for (i, &l) in lost.iter().enumerate() {
        if l {
            out |= 1 << i;
        } else {
            out |= ((bits >> k) & 1) << i;
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::BasisSpace;
    use crate::lattice::build_ring;
    use num_complex::Complex64;
    use std::sync::Arc;

    fn zeros(m: usize, n: usize) -> SnapshotSet {
        SnapshotSet::new(n, vec![0; m], "h".into(), Provenance::default()).unwrap()
    }

    #[test]
    fn ground_state_samples_zero() {
        let psi = StateVector::all_ground(BasisSpace::full(4).unwrap());
        let s = sample_snapshots(&psi, 50, 1, "h").unwrap();
        assert!(s.records().iter().all(|&r| r == 0));
    }

    #[test]
    fn born_rule_single_atom() {
        let basis = BasisSpace::full(1).unwrap();
        let a = 0.5f64.sqrt();
        let psi = StateVector::from_real(&[a, a], basis).unwrap();
        let s = sample_snapshots(&psi, 10_000, 7, "h").unwrap();
        let mean = s.records().iter().sum::<u64>() as f64 / 1e4;
        assert!((mean - 0.5).abs() < 0.015);
    }

    #[test]
    fn neel_superposition_support() {
        let basis = BasisSpace::full(4).unwrap();
        let mut amps = vec![Complex64::new(0.0, 0.0); 16];
        amps[0b0101] = Complex64::new(0.5f64.sqrt(), 0.0);
        amps[0b1010] = Complex64::new(0.0, 0.5f64.sqrt());
        let psi = StateVector::new(amps, basis).unwrap();
        let s = sample_snapshots(&psi, 500, 3, "h").unwrap();
        assert!(s.records().iter().all(|&r| r == 0b0101 || r == 0b1010));
        assert!(s.records().contains(&0b0101) && s.records().contains(&0b1010));
    }

    #[test]
    fn unnormalized_is_rejected() {
        let basis = BasisSpace::full(1).unwrap();
        let psi = StateVector::from_real(&[1.0, 1.0], basis).unwrap();
        assert!(sample_snapshots(&psi, 5, 0, "h").is_err());
    }

    #[test]
    fn detection_identity_and_rates() {
        let s = zeros(20_000, 1);
        let same = apply_detection_errors(&s, &DetectionModel::perfect(), 1).unwrap();
        assert_eq!(same.records(), s.records());
        let noisy = apply_detection_errors(&s, &DetectionModel { eta0: 0.98, eps_det: 0.0, p_pi: None }, 2).unwrap();
        let frac = noisy.records().iter().sum::<u64>() as f64 / 2e4;
        let sigma = (0.02f64 * 0.98 / 2e4).sqrt();
        assert!((frac - 0.02).abs() < 3.0 * sigma);
        let ryd = SnapshotSet::new(1, vec![1; 20_000], "h".into(), Provenance::default()).unwrap();
        let lost = apply_detection_errors(&ryd, &DetectionModel { eta0: 1.0, eps_det: 0.1, p_pi: None }, 3).unwrap();
        let frac = 1.0 - lost.records().iter().sum::<u64>() as f64 / 2e4;
        assert!((frac - 0.1).abs() < 3.0 * (0.09f64 / 2e4).sqrt());
    }

    #[test]
    fn detection_inversion_values() {
        let r = infer_detection_error(0.98, 0.053, 0.86).unwrap();
        assert!((r.p_pi - 0.93528).abs() < 1e-4);
        assert!((r.eps_det + 0.011146).abs() < 1e-5);
        assert!(r.eps_det.abs() < 0.015);
        let r = infer_detection_error(1.0, 0.0, 1.0).unwrap();
        assert_eq!((r.p_pi, r.eps_det), (1.0, 0.0));
        assert!(infer_detection_error(0.5, 0.5, 0.5).is_err());
        let u = infer_detection_error_with_uncertainty((0.98, 0.053, 0.86), (0.008, 0.005, 0.01)).unwrap();
        assert!(u.eps_det_std.unwrap() > 0.0);
    }

    #[test]
    fn postselection_rules() {
        let ring = build_ring(24, 1.0).unwrap();
        let neel: u64 = (0..24).filter(|i| i % 2 == 0).fold(0, |m, i| m | (1 << i));
        let s = SnapshotSet::new(24, vec![neel, 0b11, neel | 0b10], ring.content_hash(), Provenance::default()).unwrap();
        let p = postselect_blockade(&s, &ring, 1.4).unwrap();
        assert_eq!(p.records(), &[neel]);
        assert_eq!(p.postselect_mask.as_deref(), Some(&[true, false, false][..]));
        let q = postselect_blockade(&p, &ring, 1.4).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn holes_expand() {
        let lost = [false, true, false, true];
        assert_eq!(expand_with_holes(0b01, &lost), 0b1011);
        assert_eq!(expand_with_holes(0b10, &lost), 0b1110);
        assert_eq!(hole_mask_bits(&lost), 0b1010);
    }

    #[test]
    fn file_round_trip() {
        let ring = build_ring(6, 1.0).unwrap();
        let s = SnapshotSet::new(6, vec![0b101010, 0, 0b111111, 0b000001], ring.content_hash(), Provenance::default()).unwrap();
        let s = postselect_blockade(&s, &ring, 1.1).unwrap();
        for enc in [Encoding::Csv, Encoding::PackedHex] {
            let text = s.to_file_string(enc).unwrap();
            assert_eq!(SnapshotSet::from_file_string(&text).unwrap(), s);
        }
    }

    #[test]
    fn ensemble_sampling_uses_one_state_per_shot() {
        let basis = BasisSpace::full(2).unwrap();
        let mk = |bits| TrajectoryResult {
            final_state: StateVector::basis_state(Arc::clone(&basis), bits).unwrap(),
            jump_log: vec![],
            seed: 0,
            stream: 0,
        };
        let s = sample_ensemble(&[mk(1), mk(2), mk(3)], 2, 4, "h").unwrap();
        assert_eq!(s.records(), &[1, 1, 2, 2, 3, 3]);
    }
}
