//! Declarative experiment configuration.
//!
//! Detunings are given in units of Ω, frequencies in MHz (cycles per μs),
//! sweep rates in MHz/μs and times in μs. Unknown keys are rejected.

use std::path::Path;

use rydcrit::analysis::{FitOptions, Model, SusceptibilityConfig};
use rydcrit::measurement::Encoding;
use rydcrit::observables::{Field, Region};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundled;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub lattice: LatticeConfig,
    pub hamiltonian: HamiltonianConfig,
    #[serde(default)]
    pub gap_scan: GapScanConfig,
    #[serde(default)]
    pub ramp: RampConfig,
    #[serde(default)]
    pub decoherence: DecoherenceConfig,
    #[serde(default)]
    pub disorder: DisorderConfig,
    #[serde(default)]
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub kz: Option<KzConfig>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub limits: Limits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatticeKind {
    Ring,
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub kind: LatticeKind,
    /// Ring size.
    #[serde(default)]
    pub sites: Option<usize>,
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub ny: Option<usize>,
    #[serde(default = "one")]
    pub spacing: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationKind {
    #[default]
    Full,
    /// Drop states with two excitations inside the blockade radius.
    Blockade,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    #[serde(default = "default_omega")]
    pub omega_mhz: f64,
    /// R_b / a; sets C6 = Ω (R_b/a)^6. Exclusive with `c6`.
    #[serde(default)]
    pub blockade_ratio: Option<f64>,
    /// C6 in rad/μs · a^6.
    #[serde(default)]
    pub c6: Option<f64>,
    #[serde(default)]
    pub interaction_cutoff: Option<f64>,
    #[serde(default)]
    pub truncation: TruncationKind,
}

fn default_omega() -> f64 {
    1.6
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapModeConfig {
    #[default]
    Symmetric,
    FullSpectrum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapScanConfig {
    pub delta_min: f64,
    pub delta_max: f64,
    pub points: usize,
    pub mode: GapModeConfig,
}

impl Default for GapScanConfig {
    fn default() -> Self {
        Self {
            delta_min: -2.0,
            delta_max: 2.0,
            points: 41,
            mode: GapModeConfig::Symmetric,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampKind {
    #[default]
    LilaDiscrete,
    LilaAnalytic,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampConfig {
    pub kind: RampKind,
    pub delta_start: f64,
    /// Target detuning; the gap minimum of the scan when absent.
    pub delta_end: Option<f64>,
    /// Ramp duration for the LILA schedules.
    pub duration_us: Option<f64>,
    /// |dΔ/dt| of a linear ramp.
    pub rate_mhz_per_us: Option<f64>,
    pub points: usize,
    /// Gap at the start and end for the analytic LILA schedule, in units of
    /// Ω; read off the gap scan when absent.
    pub gap_start: Option<f64>,
    pub gap_end: Option<f64>,
    /// Linear Ω turn-on from the all-ground state before the sweep. Without
    /// it the sweep starts in the ground state at `delta_start`.
    pub omega_turn_on_us: Option<f64>,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self {
            kind: RampKind::LilaDiscrete,
            delta_start: -2.0,
            delta_end: None,
            duration_us: Some(2.0),
            rate_mhz_per_us: None,
            points: 101,
            gap_start: None,
            gap_end: None,
            omega_turn_on_us: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoherenceMode {
    #[default]
    Off,
    /// The reference Cs 54S rates.
    Reference,
    Scaled,
    Custom,
}

/// Custom decoherence inputs; frequencies in MHz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomRates {
    pub lifetime_us: f64,
    pub omega_blue_mhz: f64,
    pub omega_ir_mhz: f64,
    pub delta_int_mhz: f64,
    pub gamma_e_mhz: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoherenceConfig {
    pub mode: DecoherenceMode,
    /// Rate multiplier for `scaled`.
    pub scale: Option<f64>,
    pub custom: Option<CustomRates>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisorderConfig {
    /// Relative static spread of the pair interactions.
    pub static_v_sigma: f64,
    /// Thermal position spread, in units of a.
    pub sigma_r: f64,
    /// Thermal velocity spread, in a/μs.
    pub sigma_v: f64,
    pub t_evolve_us: f64,
}

impl DisorderConfig {
    pub fn is_active(&self) -> bool {
        self.static_v_sigma > 0.0 || self.sigma_r > 0.0 || (self.sigma_v > 0.0 && self.t_evolve_us > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    pub shots: usize,
    /// Shots per trajectory (open dynamics) or per hole pattern; above 1
    /// the shots are correlated.
    pub shots_per_trajectory: usize,
    pub eta0: f64,
    pub eps_det: f64,
    pub postselect: bool,
    /// Post-selection radius in units of a; the blockade radius when absent.
    pub postselect_radius: Option<f64>,
    /// Per-site atom loss before the ramp.
    pub hole_probability: f64,
    pub encoding: Encoding,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            shots: 1000,
            shots_per_trajectory: 1,
            eta0: 1.0,
            eps_det: 0.0,
            postselect: false,
            postselect_radius: None,
            hole_probability: 0.0,
            encoding: Encoding::PackedHex,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub field: Field,
    pub region: Region,
    pub connected: bool,
    /// Empty: report densities and the order parameter without fits.
    pub models: Vec<Model>,
    pub fit: FitOptions,
    pub bootstrap_replicates: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            field: Field::Sigma,
            region: Region::All,
            connected: false,
            models: vec![Model::Power, Model::PowerTimesExponential],
            fit: FitOptions::default(),
            bootstrap_replicates: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KzConfig {
    pub rates_mhz_per_us: Vec<f64>,
    #[serde(default = "kz_start")]
    pub delta_start: f64,
    #[serde(default = "kz_end")]
    pub delta_end: f64,
    #[serde(default = "kz_points")]
    pub points: usize,
    #[serde(default)]
    pub backward: bool,
    /// In units of Ω.
    #[serde(default = "kz_plateau")]
    pub plateau_tolerance: f64,
    #[serde(default)]
    pub susceptibility: SusceptibilityConfig,
}

fn kz_start() -> f64 {
    -1.0
}

fn kz_end() -> f64 {
    3.0
}

fn kz_points() -> usize {
    50
}

fn kz_plateau() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    /// Global error target of the time stepper (state amplitude).
    pub step_tolerance: f64,
    pub max_step_us: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            step_tolerance: 1e-8,
            max_step_us: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    /// Hard cap on full-space sites; raise deliberately.
    pub max_full_sites: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_full_sites: 22 }
    }
}

impl ExperimentConfig {
    /// Parse TOML text, reporting the path of the offending field.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config {
            path: String::new(),
            message: e.to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a file path or `bundled:NAME`.
    pub fn load(source: &str) -> Result<Self, CliError> {
        if let Some(name) = source.strip_prefix("bundled:") {
            let text = bundled::get(name).ok_or_else(|| CliError::Config {
                path: String::new(),
                message: format!("no bundled config named {name:?}; available: {}", bundled::NAMES.join(", ")),
            })?;
            return Self::from_toml(text);
        }
        let text = std::fs::read_to_string(Path::new(source)).map_err(|e| CliError::Config {
            path: String::new(),
            message: format!("cannot read {source}: {e}"),
        })?;
        Self::from_toml(&text)
    }

    pub fn n_sites(&self) -> usize {
        match self.lattice.kind {
            LatticeKind::Ring => self.lattice.sites.unwrap_or(0),
            LatticeKind::Square => self.lattice.nx.unwrap_or(0) * self.lattice.ny.unwrap_or(0),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, message: String| {
            Err(CliError::Config {
                path: path.into(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        let l = &self.lattice;
        match l.kind {
            LatticeKind::Ring => {
                if l.sites.is_none() || l.nx.is_some() || l.ny.is_some() {
                    return bad("lattice", "a ring takes `sites` only".into());
                }
            }
            LatticeKind::Square => {
                if l.sites.is_some() || l.nx.is_none() || l.ny.is_none() {
                    return bad("lattice", "a square lattice takes `nx` and `ny`".into());
                }
            }
        }
        if !(l.spacing > 0.0) {
            return bad("lattice.spacing", "must be positive".into());
        }
        let h = &self.hamiltonian;
        match (h.blockade_ratio, h.c6) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("hamiltonian", "give exactly one of `blockade_ratio` and `c6`".into())
            }
            (Some(r), None) if !(r > 0.0) => return bad("hamiltonian.blockade_ratio", "must be positive".into()),
            (None, Some(c)) if !(c > 0.0) => return bad("hamiltonian.c6", "must be positive".into()),
            _ => {}
        }
        if !(h.omega_mhz > 0.0) {
            return bad("hamiltonian.omega_mhz", "must be positive".into());
        }
        let g = &self.gap_scan;
        if g.points < 3 || !(g.delta_max > g.delta_min) {
            return bad("gap_scan", "need delta_min < delta_max and at least 3 points".into());
        }
        let r = &self.ramp;
        match r.kind {
            RampKind::Linear if r.rate_mhz_per_us.is_none_or(|v| !(v > 0.0)) => {
                return bad("ramp.rate_mhz_per_us", "a linear ramp needs a positive rate".into())
            }
            RampKind::LilaDiscrete | RampKind::LilaAnalytic if r.duration_us.is_none_or(|v| !(v > 0.0)) => {
                return bad("ramp.duration_us", "a LILA ramp needs a positive duration".into())
            }
            _ => {}
        }
        if r.points < 2 {
            return bad("ramp.points", "need at least 2".into());
        }
        let d = &self.decoherence;
        match d.mode {
            DecoherenceMode::Scaled if d.scale.is_none_or(|s| !(s >= 0.0)) => {
                return bad("decoherence.scale", "scaled mode needs a non-negative scale".into())
            }
            DecoherenceMode::Custom if d.custom.is_none() => {
                return bad("decoherence.custom", "custom mode needs a [decoherence.custom] table".into())
            }
            _ => {}
        }
        let m = &self.measurement;
        if m.shots == 0 || m.shots_per_trajectory == 0 {
            return bad("measurement.shots", "need at least one shot".into());
        }
        if !(0.0..=1.0).contains(&m.eta0) || !(0.0..=1.0).contains(&m.eps_det) {
            return bad("measurement", "eta0 and eps_det must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&m.hole_probability) {
            return bad("measurement.hole_probability", "must lie in [0, 1)".into());
        }
        let nm = &self.numerics;
        if !(nm.step_tolerance > 0.0) || !(nm.max_step_us > 0.0) {
            return bad("numerics", "step_tolerance and max_step_us must be positive".into());
        }
        if let Some(k) = &self.kz {
            if k.rates_mhz_per_us.is_empty() || k.rates_mhz_per_us.iter().any(|v| !(*v > 0.0)) {
                return bad("kz.rates_mhz_per_us", "need positive rates".into());
            }
        }
        Ok(())
    }
}
