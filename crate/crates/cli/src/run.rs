//! Pipeline stages. Each stage writes its artifacts through [`Outputs`],
//! which records a SHA-256 per file for the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use rydcrit::analysis::{
    fit_correlator, fit_with_bootstrap, kz_rate_scan, BootstrapOptions, FitResult, KzScan, KzScanConfig, UnitarySweep,
};
use rydcrit::dynamics::{
    adiabaticity_check, evolve_trajectory, evolve_unitary, lila_ramp_analytic, lila_ramp_discrete, linear_ramp,
    make_jump_set, AdiabaticityReport, JumpOperatorSet, JumpParams, RampProfile, StepControl,
};
use rydcrit::hamiltonian::{c6_from_blockade_ratio, BasisSpace, Hamiltonian, HamiltonianSpec, StateVector, Truncation};
use rydcrit::lattice::{build_ring, build_square, sample_disorder, DisorderSample, Lattice, ThermalMotion};
use rydcrit::measurement::{
    apply_detection_errors, expand_with_holes, hole_mask_bits, postselect_blockade, sample_holes, sample_snapshots,
    DetectionModel, Provenance, SnapshotSet,
};
use rydcrit::observables::{order_parameter, rydberg_density, two_point, Estimate};
use rydcrit::spectrum::{gap_profile, ground_state_with, GapMode, GapProfile, SolverOptions};
use rydcrit::units::mhz;
use rydcrit::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{
    AnalysisConfig, DecoherenceMode, ExperimentConfig, GapModeConfig, LatticeKind, RampKind, TruncationKind,
};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GapScan,
    Ramp,
    Prepare,
    Kz,
    Analyze,
    Pipeline,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Overrides the config's master seed.
    pub seed: Option<u64>,
    pub plot_data: bool,
    /// Analyze this snapshot file instead of preparing new shots.
    pub snapshots: Option<PathBuf>,
}

/// Sub-seed for one named consumer of randomness.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest holds 8 bytes"))
}

const SEED_LABELS: [&str; 6] = ["disorder", "holes", "trajectories", "shots", "detection", "bootstrap"];

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub config_name: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<String>,
    pub files: Vec<FileEntry>,
    pub wall_time_s: f64,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
    plot: Option<String>,
}

impl Outputs {
    fn new(dir: &Path, plot_data: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            context: format!("creating {}", dir.display()),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            plot: plot_data.then(|| String::from("panel,series,x,y\n")),
        })
    }

    fn write(&mut self, name: &str, body: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|source| CliError::Io {
            context: format!("writing {}", path.display()),
            source,
        })?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry {
            name: name.into(),
            sha256: sha256_hex(body),
            bytes: body.len(),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut body = serde_json::to_vec_pretty(value).expect("artifact serializes");
        body.push(b'\n');
        self.write(name, &body)
    }

    fn plot(&mut self, panel: &str, series: &str, x: f64, y: f64) {
        if let Some(p) = &mut self.plot {
            let _ = writeln!(p, "{panel},{series},{x},{y}");
        }
    }
}

/// Everything a stage needs, resolved once from the config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub lattice: Lattice,
    /// Rabi frequency in rad/μs.
    pub omega: f64,
    pub c6: f64,
    pub disorder: Option<DisorderSample>,
    pub hamiltonian: Hamiltonian,
}

#[derive(Clone, Debug, Serialize)]
pub struct RampReport {
    pub config_hash: String,
    pub kind: RampKind,
    pub delta_start: f64,
    pub delta_end: f64,
    pub total_time_us: f64,
    pub omega_turn_on_us: Option<f64>,
    pub adiabaticity: Option<AdiabaticityReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepareReport {
    pub config_hash: String,
    pub open_system: bool,
    pub preparations: usize,
    pub shots_per_preparation: usize,
    pub distinct_hole_masks: usize,
    pub total_jumps: usize,
    pub n_shots: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub inputs_hash: String,
    pub analysis: AnalysisConfig,
    pub n_shots: usize,
    pub rejection_fraction: Option<f64>,
    pub mean_density: Estimate,
    pub order_parameter: Estimate,
    pub fits: BTreeMap<String, FitResult>,
    /// Models whose fit failed, with the reason.
    pub errors: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct KzReport {
    pub config_hash: String,
    pub omega: f64,
    pub scan: KzScan,
}

fn model_key(m: rydcrit::analysis::Model) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{m:?}"))
}

impl Experiment {
    pub fn new(config: &ExperimentConfig, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut config = config.clone();
        if let Some(s) = seed_override {
            config.seed = s;
        }
        let master_seed = config.seed;
        let l = &config.lattice;
        let lattice = match l.kind {
            LatticeKind::Ring => build_ring(l.sites.unwrap_or(0), l.spacing),
            LatticeKind::Square => build_square(l.nx.unwrap_or(0), l.ny.unwrap_or(0), l.spacing),
        }
        .map_err(CliError::stage("lattice"))?;
        let n = lattice.n_sites();
        if config.hamiltonian.truncation == TruncationKind::Full && n > config.limits.max_full_sites {
            return Err(CliError::Capacity(format!(
                "{n} sites in the full basis exceed limits.max_full_sites = {}",
                config.limits.max_full_sites
            )));
        }
        let omega = mhz(config.hamiltonian.omega_mhz);
        let c6 = match (config.hamiltonian.blockade_ratio, config.hamiltonian.c6) {
            (Some(r), _) => c6_from_blockade_ratio(omega, r * l.spacing),
            (None, Some(c)) => c,
            (None, None) => unreachable!("validated config holds a coupling"),
        };
        let d = &config.disorder;
        let disorder = if d.is_active() {
            let thermal = ThermalMotion {
                sigma_r: d.sigma_r * l.spacing,
                sigma_v: d.sigma_v * l.spacing,
                t_evolve: d.t_evolve_us,
            };
            Some(
                sample_disorder(&lattice, d.static_v_sigma, thermal, derive_seed(master_seed, "disorder"))
                    .map_err(CliError::stage("disorder"))?,
            )
        } else {
            None
        };
        let mut exp = Self {
            config,
            master_seed,
            lattice,
            omega,
            c6,
            disorder,
            hamiltonian: Hamiltonian::full(
                HamiltonianSpec::from_positions(&[[0.0, 0.0]], omega, 0.0, c6, None, None)
                    .map_err(CliError::stage("hamiltonian"))?,
            )
            .map_err(CliError::stage("hamiltonian"))?,
        };
        exp.hamiltonian = exp.hamiltonian_for(&vec![false; n])?;
        Ok(exp)
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    pub fn step_control(&self) -> StepControl {
        StepControl {
            tol: self.config.numerics.step_tolerance,
            max_dt: self.config.numerics.max_step_us,
            ..Default::default()
        }
    }

    /// Hamiltonian over the atoms that survive `lost`, at the ramp's start.
    pub fn hamiltonian_for(&self, lost: &[bool]) -> Result<Hamiltonian, CliError> {
        let stage = CliError::stage("hamiltonian");
        let coords = self.disorder.as_ref().map_or(&self.lattice.coords, |d| &d.displaced_coords);
        let keep: Vec<usize> = (0..self.lattice.n_sites()).filter(|&i| !lost[i]).collect();
        if keep.is_empty() {
            return Err(stage(Error::domain("every atom was lost")));
        }
        let pos: Vec<[f64; 2]> = keep.iter().map(|&i| coords[i]).collect();
        let factors: Option<Vec<f64>> = self
            .disorder
            .as_ref()
            .map(|d| keep.iter().flat_map(|&i| keep.iter().map(move |&j| d.factor(i, j))).collect());
        let h = &self.config.hamiltonian;
        let spec = HamiltonianSpec::from_positions(
            &pos,
            self.omega,
            self.config.ramp.delta_start * self.omega,
            self.c6,
            factors.as_deref(),
            h.interaction_cutoff.map(|r| r * self.config.lattice.spacing),
        )
        .map_err(CliError::stage("hamiltonian"))?;
        let truncation = match h.truncation {
            TruncationKind::Full => Truncation::Full,
            TruncationKind::Blockade => Truncation::Blockade {
                radius: spec.blockade_radius().map_err(CliError::stage("hamiltonian"))?,
            },
        };
        let basis = BasisSpace::for_spec(&spec, truncation).map_err(CliError::stage("hamiltonian"))?;
        Hamiltonian::new(spec, basis).map_err(CliError::stage("hamiltonian"))
    }

    pub fn gap_scan(&self) -> Result<GapProfile, CliError> {
        let g = &self.config.gap_scan;
        let grid: Vec<f64> = (0..g.points)
            .map(|k| (g.delta_min + (g.delta_max - g.delta_min) * k as f64 / (g.points - 1) as f64) * self.omega)
            .collect();
        let mode = match g.mode {
            GapModeConfig::Symmetric => GapMode::Symmetric,
            GapModeConfig::FullSpectrum => GapMode::FullSpectrum,
        };
        gap_profile(&self.hamiltonian, Some(&self.lattice), &grid, &mode, &SolverOptions::default())
            .map_err(CliError::stage("gap-scan"))
    }

    /// The detuning schedule (with the optional Ω turn-on prepended) and the
    /// adiabaticity diagnostic of the sweep part for LILA ramps.
    pub fn ramp(&self, profile: &GapProfile) -> Result<(RampProfile, Option<AdiabaticityReport>), CliError> {
        let stage = CliError::stage("ramp");
        let r = &self.config.ramp;
        let w = self.omega;
        let d0 = r.delta_start * w;
        let d1 = r.delta_end.map_or_else(|| profile.minimum_location(), |d| d * w);
        let sweep = match r.kind {
            RampKind::LilaDiscrete => {
                lila_ramp_discrete(profile, d0, d1, r.duration_us.unwrap_or_default(), r.points).map_err(stage)?
            }
            RampKind::LilaAnalytic => {
                let e0 = match r.gap_start {
                    Some(g) => g * w,
                    None => profile.gap_at(d0).map_err(CliError::stage("ramp"))?,
                };
                let ec = match r.gap_end {
                    Some(g) => g * w,
                    None => profile.gap_at(d1).map_err(CliError::stage("ramp"))?,
                };
                lila_ramp_analytic(e0, ec, d0, d1, r.duration_us.unwrap_or_default(), r.points, w)
                    .map_err(CliError::stage("ramp"))?
            }
            RampKind::Linear => {
                linear_ramp(d0, d1, mhz(r.rate_mhz_per_us.unwrap_or_default()), w).map_err(CliError::stage("ramp"))?
            }
        };
        let report = match r.kind {
            RampKind::Linear => None,
            _ => Some(adiabaticity_check(&sweep, profile).map_err(CliError::stage("ramp"))?),
        };
        let ramp = match r.omega_turn_on_us {
            Some(t) => sweep.with_omega_turn_on(t).map_err(CliError::stage("ramp"))?,
            None => sweep,
        };
        Ok((ramp, report))
    }

    /// All atoms in |g⟩ when Ω is turned on by the ramp, otherwise the ground
    /// state at the starting detuning.
    pub fn initial_state(&self, h: &Hamiltonian) -> Result<StateVector, CliError> {
        if self.config.ramp.omega_turn_on_us.is_some() {
            return Ok(StateVector::all_ground(h.basis().clone()));
        }
        let (_, psi) = ground_state_with(&h.with_delta(self.config.ramp.delta_start * self.omega), &SolverOptions::default())
            .map_err(CliError::stage("prepare"))?;
        Ok(psi)
    }

    pub fn jumps(&self) -> Result<Option<JumpOperatorSet>, CliError> {
        let d = &self.config.decoherence;
        let params = match d.mode {
            DecoherenceMode::Off => return Ok(None),
            DecoherenceMode::Reference => JumpParams::reference(),
            DecoherenceMode::Scaled => JumpParams::reference().scaled(d.scale.unwrap_or(1.0)),
            DecoherenceMode::Custom => {
                let c = d.custom.as_ref().expect("validated config holds custom rates");
                JumpParams::from_lifetime(
                    c.lifetime_us,
                    mhz(c.omega_blue_mhz),
                    mhz(c.omega_ir_mhz),
                    mhz(c.delta_int_mhz),
                    mhz(c.gamma_e_mhz),
                )
                .map_err(CliError::stage("prepare"))?
            }
        };
        make_jump_set(&params).map(Some).map_err(CliError::stage("prepare"))
    }

    /// Prepare and measure. One preparation yields `shots_per_trajectory`
    /// shots; each draws its own hole pattern and, with decoherence, its own
    /// trajectory.
    pub fn prepare(&self, ramp: &RampProfile) -> Result<(SnapshotSet, PrepareReport), CliError> {
        let stage = CliError::stage("prepare");
        let m = &self.config.measurement;
        let n = self.lattice.n_sites();
        let spt = m.shots_per_trajectory;
        let n_prep = m.shots.div_ceil(spt);
        let masks: Vec<Vec<bool>> = (0..n_prep as u64)
            .map(|k| {
                if m.hole_probability > 0.0 {
                    sample_holes(n, m.hole_probability, self.seed("holes"), k)
                } else {
                    Ok(vec![false; n])
                }
            })
            .collect::<Result<_, _>>()
            .map_err(CliError::stage("prepare"))?;
        let mut distinct: Vec<&Vec<bool>> = Vec::new();
        for mask in &masks {
            if !distinct.contains(&mask) {
                distinct.push(mask);
            }
        }
        let setups: Vec<(Hamiltonian, StateVector)> = distinct
            .iter()
            .map(|mask| {
                let h = self.hamiltonian_for(mask)?;
                let psi = self.initial_state(&h)?;
                Ok((h, psi))
            })
            .collect::<Result<_, CliError>>()?;
        let mask_index = |mask: &Vec<bool>| distinct.iter().position(|d| *d == mask).expect("mask listed");
        let ctl = self.step_control();
        let jumps = self.jumps()?;
        let shot_seed = self.seed("shots");
        let hash = self.lattice.content_hash();
        let mut records = Vec::with_capacity(n_prep * spt);
        let mut total_jumps = 0;
        match &jumps {
            None => {
                let finals: Vec<StateVector> = setups
                    .par_iter()
                    .map(|(h, psi)| evolve_unitary(h, ramp, psi, &ctl))
                    .collect::<Result<_, _>>()
                    .map_err(CliError::stage("prepare"))?;
                // One draw per hole pattern, handed out in preparation order.
                let mut pools: Vec<std::vec::IntoIter<u64>> = Vec::with_capacity(distinct.len());
                for (j, mask) in distinct.iter().enumerate() {
                    let count = masks.iter().filter(|m| m == mask).count() * spt;
                    let seed = derive_seed(shot_seed, &format!("mask-{:x}", hole_mask_bits(mask)));
                    let s = sample_snapshots(&finals[j], count, seed, &hash).map_err(CliError::stage("prepare"))?;
                    pools.push(s.records().to_vec().into_iter());
                }
                for mask in &masks {
                    let j = mask_index(mask);
                    for _ in 0..spt {
                        let bits = pools[j].next().expect("pool sized to its preparations");
                        records.push(expand_with_holes(bits, mask));
                    }
                }
            }
            Some(jumps) => {
                let traj_seed = self.seed("trajectories");
                let runs: Vec<(usize, Vec<u64>)> = masks
                    .par_iter()
                    .enumerate()
                    .map(|(k, mask)| {
                        let (h, psi) = &setups[mask_index(mask)];
                        let r = evolve_trajectory(h, ramp, jumps, psi, traj_seed, k as u64, &ctl)?;
                        let seed = derive_seed(shot_seed, &format!("trajectory-{k}"));
                        let s = sample_snapshots(&r.final_state, spt, seed, &hash)?;
                        Ok((r.jump_log.len(), s.records().iter().map(|&b| expand_with_holes(b, mask)).collect()))
                    })
                    .collect::<Result<_, Error>>()
                    .map_err(CliError::stage("prepare"))?;
                for (j, recs) in runs {
                    total_jumps += j;
                    records.extend(recs);
                }
            }
        }
        records.truncate(m.shots);
        let truncation_radius = match self.hamiltonian.basis().truncation() {
            Truncation::Blockade { radius } => Some(radius),
            Truncation::Full => None,
        };
        let provenance = Provenance {
            source: if jumps.is_some() { "trajectories" } else { "unitary" }.into(),
            seed: shot_seed,
            shots_per_trajectory: Some(spt),
            truncation_radius,
            hole_probability: (m.hole_probability > 0.0).then_some(m.hole_probability),
            ..Default::default()
        };
        let mut snaps = SnapshotSet::new(n, records, hash, provenance).map_err(CliError::stage("prepare"))?;
        if m.eta0 < 1.0 || m.eps_det > 0.0 {
            let model = DetectionModel {
                eta0: m.eta0,
                eps_det: m.eps_det,
                p_pi: None,
            };
            snaps = apply_detection_errors(&snaps, &model, self.seed("detection")).map_err(stage)?;
        }
        let report = PrepareReport {
            config_hash: self.config.hash(),
            open_system: jumps.is_some(),
            preparations: n_prep,
            shots_per_preparation: spt,
            distinct_hole_masks: distinct.len(),
            total_jumps,
            n_shots: snaps.n_shots(),
        };
        Ok((snaps, report))
    }

    pub fn postselection_radius(&self) -> Result<f64, CliError> {
        match self.config.measurement.postselect_radius {
            Some(r) => Ok(r * self.config.lattice.spacing),
            None => self.hamiltonian.spec().blockade_radius().map_err(CliError::stage("analyze")),
        }
    }

    /// Correlator, order parameter and model fits of a snapshot set.
    pub fn analyze(
        &self,
        snaps: &SnapshotSet,
        inputs_hash: String,
    ) -> Result<(rydcrit::observables::CorrelatorSeries, AnalysisReport), CliError> {
        let a = &self.config.analysis;
        if snaps.lattice_hash != self.lattice.content_hash() {
            return Err(CliError::Config {
                path: "lattice".into(),
                message: "snapshots were recorded on a different lattice".into(),
            });
        }
        let snaps = if self.config.measurement.postselect {
            postselect_blockade(snaps, &self.lattice, self.postselection_radius()?).map_err(CliError::stage("analyze"))?
        } else {
            snaps.clone()
        };
        let lat = &self.lattice;
        let correlator = |s: &SnapshotSet| two_point(s, lat, a.field, a.region, a.connected);
        let series = correlator(&snaps).map_err(CliError::stage("analyze"))?;
        let mut fits = BTreeMap::new();
        let mut errors = BTreeMap::new();
        for &model in &a.models {
            let res = if a.bootstrap_replicates >= 2 {
                let boot = BootstrapOptions {
                    replicates: a.bootstrap_replicates,
                    seed: self.seed("bootstrap"),
                    ..Default::default()
                };
                fit_with_bootstrap(&snaps, correlator, model, &a.fit, &boot)
            } else {
                fit_correlator(&series, model, &a.fit)
            };
            match res {
                Ok(f) => {
                    fits.insert(model_key(model), f);
                }
                Err(e) if matches!(e.root(), Error::BootstrapInstability { .. }) => {
                    return Err(CliError::Stage {
                        stage: "analyze",
                        source: e,
                    })
                }
                Err(e) => {
                    log::warn!("{} fit failed: {e}", model_key(model));
                    errors.insert(model_key(model), e.to_string());
                }
            }
        }
        let report = AnalysisReport {
            config_hash: self.config.hash(),
            inputs_hash,
            analysis: a.clone(),
            n_shots: snaps.n_shots(),
            rejection_fraction: snaps.rejection_fraction(),
            mean_density: rydberg_density(&snaps).map_err(CliError::stage("analyze"))?.global,
            order_parameter: order_parameter(&snaps, lat, a.field, a.region).map_err(CliError::stage("analyze"))?,
            fits,
            errors,
        };
        Ok((series, report))
    }

    pub fn kz(&self) -> Result<KzScan, CliError> {
        let k = self.config.kz.as_ref().ok_or_else(|| CliError::Config {
            path: "kz".into(),
            message: "the kz stage needs a [kz] table".into(),
        })?;
        if self.config.decoherence.mode != DecoherenceMode::Off {
            log::warn!("rate scans run closed-system sweeps; decoherence settings are ignored");
        }
        let sim = UnitarySweep {
            hamiltonian: self.hamiltonian.clone(),
            step: self.step_control(),
            solver: SolverOptions::default(),
        };
        let w = self.omega;
        let rates: Vec<f64> = k.rates_mhz_per_us.iter().map(|&r| mhz(r)).collect();
        let cfg = KzScanConfig {
            delta_start: k.delta_start * w,
            delta_end: k.delta_end * w,
            points: k.points,
            backward: k.backward,
            susceptibility: k.susceptibility,
            plateau_tolerance: k.plateau_tolerance * w,
        };
        kz_rate_scan(&sim, &rates, &cfg).map_err(CliError::stage("kz"))
    }
}

fn snapshot_file_name(exp: &Experiment) -> &'static str {
    match exp.config.measurement.encoding {
        rydcrit::measurement::Encoding::Csv => "snapshots.csv",
        rydcrit::measurement::Encoding::PackedHex => "snapshots.txt",
    }
}

/// Run `command` and write its artifacts plus `manifest.json` into the
/// output directory.
pub fn execute(command: Command, config: &ExperimentConfig, opts: &RunOptions) -> Result<Manifest, CliError> {
    let start = Instant::now();
    let exp = Experiment::new(config, opts.seed)?;
    let mut out = Outputs::new(&opts.out_dir, opts.plot_data)?;
    out.write_json("config.json", &exp.config)?;
    let hash = exp.config.hash();
    let w = exp.omega;
    let mut stages: Vec<&str> = Vec::new();

    let wants_chain = match command {
        Command::GapScan | Command::Ramp | Command::Prepare | Command::Pipeline => true,
        Command::Analyze => opts.snapshots.is_none(),
        Command::Kz => false,
    };
    let mut snapshot_input: Option<(SnapshotSet, String)> = None;
    if wants_chain {
        stages.push("gap-scan");
        let profile = exp.gap_scan()?;
        out.write("gap_profile.csv", profile.to_csv().as_bytes())?;
        for (d, g) in profile.delta_grid.iter().zip(&profile.gaps) {
            out.plot("gap", "gap", d / w, g / w);
        }
        if command != Command::GapScan {
            stages.push("ramp");
            let (ramp, adiabaticity) = exp.ramp(&profile)?;
            out.write("ramp.csv", ramp.to_csv().as_bytes())?;
            for (t, d) in ramp.times.iter().zip(&ramp.deltas) {
                out.plot("ramp", "delta", *t, d / w);
            }
            let r = &exp.config.ramp;
            out.write_json(
                "ramp.json",
                &RampReport {
                    config_hash: hash.clone(),
                    kind: r.kind,
                    delta_start: ramp.deltas[0],
                    delta_end: ramp.deltas[ramp.len() - 1],
                    total_time_us: ramp.total_time(),
                    omega_turn_on_us: r.omega_turn_on_us,
                    adiabaticity,
                },
            )?;
            if command != Command::Ramp {
                stages.push("prepare");
                let (snaps, report) = exp.prepare(&ramp)?;
                let body = snaps
                    .to_file_string(exp.config.measurement.encoding)
                    .map_err(CliError::stage("prepare"))?;
                out.write(snapshot_file_name(&exp), body.as_bytes())?;
                out.write_json("prepare.json", &report)?;
                snapshot_input = Some((snaps, sha256_hex(body.as_bytes())));
            }
        }
    }
    if command == Command::Analyze && snapshot_input.is_none() {
        let path = opts.snapshots.as_ref().expect("analyze without a chain reads a file");
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        let snaps = SnapshotSet::from_file_string(&text).map_err(CliError::stage("analyze"))?;
        snapshot_input = Some((snaps, sha256_hex(text.as_bytes())));
    }
    if matches!(command, Command::Analyze | Command::Pipeline) {
        stages.push("analyze");
        let (snaps, inputs_hash) = snapshot_input.take().expect("snapshots prepared or loaded");
        let (series, report) = exp.analyze(&snaps, inputs_hash)?;
        out.write("correlator.csv", series.to_csv().as_bytes())?;
        for (d, v) in series.distances.iter().zip(&series.values) {
            out.plot("correlator", "data", *d, *v);
        }
        for (name, fit) in &report.fits {
            for &d in series.distances.iter().filter(|&&d| d > 0.0) {
                if let Some(v) = fit.evaluate(0, d) {
                    out.plot("correlator", &format!("fit-{name}"), d, v);
                }
            }
        }
        out.write_json("fits.json", &report)?;
    }
    if command == Command::Kz || (command == Command::Pipeline && exp.config.kz.is_some()) {
        stages.push("kz");
        let scan = exp.kz()?;
        out.write("kz_scan.csv", scan.to_csv().as_bytes())?;
        for p in &scan.forward {
            out.plot("kz", "forward", rydcrit::units::to_mhz(p.rate), p.delta_max / w);
        }
        for p in scan.backward.iter().flatten() {
            out.plot("kz", "backward", rydcrit::units::to_mhz(p.rate), p.delta_max / w);
        }
        out.write_json(
            "kz_scan.json",
            &KzReport {
                config_hash: hash.clone(),
                omega: w,
                scan,
            },
        )?;
    }
    if let Some(p) = out.plot.take() {
        out.write("plot_data.csv", p.as_bytes())?;
    }
    let manifest = Manifest {
        tool: "rydcrit-cli".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: rydcrit::VERSION.into(),
        config_name: exp.config.name.clone(),
        config_hash: hash,
        master_seed: exp.master_seed,
        seeds: SEED_LABELS.iter().map(|l| (l.to_string(), exp.seed(l))).collect(),
        stages: stages.into_iter().map(String::from).collect(),
        files: out.files.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    out.write_json("manifest.json", &manifest)?;
    Ok(manifest)
}
