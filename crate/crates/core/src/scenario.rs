//! Named end-to-end experiments: configuration, reproducible seeding,
//! stage orchestration, reports and plot-data emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{
    fit_envelope_decay, ground_reference_state, sample_records, synth_time_trace, AmplifierChainParams, PrepLabel,
    RecordBatch, TimeTraceParams, DEFAULT_RESIDUAL_THERMAL,
};
use crate::dynamics::{
    build_generator_with, cross_coincidence_g2, evolve, excited_register, integrated_photon_number, output_flux,
    Direction, ExchangeTreatment, LindbladGenerator,
};
use crate::emission::{apply_imperfection, noon_coefficients, EmissionSetup, EmitterConfig, Imperfection, QubitPreparation, QubitState};
use crate::error::{Error, Result};
use crate::fock::{expect_moment, fidelity, TwoModeState, C64};
use crate::moments::{
    calibrate_gain_in, calibrate_gain_joint, invert_with_errors, noise_moments_from, MomentAccumulator, MomentKind,
    MomentTable, GAIN_BRACKET,
};
use crate::spectroscopy::{
    fit_s21, s21_master_equation, s21_model, standard_grids, synth_dataset, thermal_occupation_to_temperature,
    FitOptions, S21Fit, SpectroscopyParams,
};
use crate::tomography::{density_matrix_json, fit_noise_thermal, mle_density_matrix, MLEConfig, NoiseFitResult};

/// Version of the configuration and report schema.
pub const SCHEMA_VERSION: u32 = 1;
/// Moment order used by the tomography pipeline.
pub const PIPELINE_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Two fully excited emitters at Δx = 3λ/4.
    #[serde(rename = "noon_3l4")]
    Noon3l4,
    /// Two fully excited emitters at Δx = λ/2.
    #[serde(rename = "partition_l2")]
    PartitionL2,
    #[serde(rename = "gain_calibration")]
    GainCalibration,
    #[serde(rename = "spectroscopy_fit")]
    SpectroscopyFit,
    #[serde(rename = "dynamics_check")]
    DynamicsCheck,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Noon3l4,
        Scenario::PartitionL2,
        Scenario::GainCalibration,
        Scenario::SpectroscopyFit,
        Scenario::DynamicsCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Noon3l4 => "noon_3l4",
            Scenario::PartitionL2 => "partition_l2",
            Scenario::GainCalibration => "gain_calibration",
            Scenario::SpectroscopyFit => "spectroscopy_fit",
            Scenario::DynamicsCheck => "dynamics_check",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario '{name}'")))
    }
}

/// Grid and noise settings of the spectroscopy scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectroscopySettings {
    pub half_span_hz: f64,
    pub n_detuning: usize,
    pub power_dbm_min: f64,
    pub power_dbm_max: f64,
    pub n_power: usize,
    /// Standard deviation of the circular complex noise per point.
    pub noise_sigma: f64,
    /// Number of independent noisy datasets fitted.
    pub n_noise_seeds: usize,
    /// Initial guess = truth × this factor, for every parameter.
    pub guess_factor: f64,
    /// Side of the (δω, P) grid of the master-equation cross-check.
    pub cross_check_points: usize,
}

impl Default for SpectroscopySettings {
    fn default() -> Self {
        Self {
            half_span_hz: 4e6,
            n_detuning: 1281,
            power_dbm_min: -154.0,
            power_dbm_max: -120.0,
            n_power: 545,
            noise_sigma: 0.02,
            n_noise_seeds: 20,
            guess_factor: 3.0,
            cross_check_points: 5,
        }
    }
}

/// Time grid and trace settings of the dynamics scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSettings {
    /// Integration horizon in units of 1/γ.
    pub horizon_gamma_times: f64,
    /// Number of trajectory samples.
    pub n_times: usize,
    /// Steps of the coincidence propagator grid.
    pub coincidence_grid: usize,
    /// Downconverted carrier of the averaged voltage traces (Hz).
    pub f_d: f64,
    /// Per-shot noise of the voltage traces (units of √γ).
    pub trace_noise: f64,
    pub trace_averages: usize,
}

impl Default for DynamicsSettings {
    fn default() -> Self {
        Self {
            horizon_gamma_times: 12.0,
            n_times: 601,
            coincidence_grid: 1000,
            f_d: 40e6,
            trace_noise: 2.0,
            trace_averages: 4000,
        }
    }
}

fn default_cutoff() -> usize {
    3
}

fn default_residual_thermal() -> f64 {
    DEFAULT_RESIDUAL_THERMAL
}

fn default_true() -> bool {
    true
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// One experiment, as read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub scenario: Scenario,
    pub device: EmitterConfig,
    pub chain: AmplifierChainParams,
    /// Signal shots (calibration shots for `gain_calibration`).
    pub n_shots: usize,
    /// Ground-state (noise reference) shots; equal to `n_shots` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_ground_shots: Option<usize>,
    /// Calibration-state shots of the tomography scenarios; equal to
    /// `n_shots` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_calibration_shots: Option<usize>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imperfection: Option<Imperfection>,
    /// Where artifacts are written; not part of the configuration hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Fock cutoff per mode of the simulated signal states.
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    /// Residual thermal occupation of the signal path in ground-state runs,
    /// removed again from the noise moments.
    #[serde(default = "default_residual_thermal")]
    pub residual_thermal: f64,
    /// Calibrate the gains from a calibration batch instead of trusting the
    /// nominal chain gains.
    #[serde(default = "default_true")]
    pub calibrate: bool,
    /// Reconstruction settings; the seed is derived from `seed`.
    #[serde(default)]
    pub mle: MLEConfig,
    #[serde(default)]
    pub spectroscopy: SpectroscopySettings,
    #[serde(default)]
    pub dynamics: DynamicsSettings,
    /// Also write the raw heterodyne records.
    #[serde(default)]
    pub save_records: bool,
}

impl ScenarioConfig {
    /// Canonical configuration of each scenario: n_noise = 1, G = 10⁴,
    /// 10⁶ shots.
    pub fn preset(scenario: Scenario) -> Self {
        use std::f64::consts::PI;
        let device = match scenario {
            Scenario::Noon3l4 | Scenario::DynamicsCheck => EmitterConfig::noon_device(),
            Scenario::PartitionL2 => EmitterConfig::partition_device(),
            Scenario::GainCalibration => EmitterConfig::single_qubit(2.0 * PI * 4.85e9, 2.0 * PI * 0.53e6),
            Scenario::SpectroscopyFit => {
                let p = SpectroscopyParams::device();
                let mut cfg = EmitterConfig::single_qubit(p.omega, p.gamma);
                cfg.gamma_phi = p.gamma_phi;
                cfg.n_th = p.n_th;
                cfg
            }
        };
        Self {
            schema_version: SCHEMA_VERSION,
            scenario,
            device,
            chain: AmplifierChainParams {
                gain_l: 1e4,
                gain_r: 1e4,
                n_noise_l: 1.0,
                n_noise_r: 1.0,
            },
            n_shots: 1_000_000,
            n_ground_shots: None,
            n_calibration_shots: None,
            seed: 1,
            imperfection: None,
            output_dir: None,
            cutoff: default_cutoff(),
            residual_thermal: DEFAULT_RESIDUAL_THERMAL,
            calibrate: true,
            mle: MLEConfig::default(),
            spectroscopy: SpectroscopySettings::default(),
            dynamics: DynamicsSettings::default(),
            save_records: false,
        }
    }

    /// A high added-noise amplifier chain (n_noise ≈ 8.6 / 7.3), which needs about
    /// 50× more shots for the same fourth-moment precision.
    pub fn high_noise_preset(scenario: Scenario) -> Self {
        let mut cfg = Self::preset(scenario);
        cfg.chain.n_noise_l = 8.615;
        cfg.chain.n_noise_r = 7.264;
        cfg.n_shots = 50_000_000;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_ground(&self) -> usize {
        self.n_ground_shots.unwrap_or(self.n_shots)
    }

    pub fn n_calibration(&self) -> usize {
        self.n_calibration_shots.unwrap_or(self.n_shots)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "schema version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_shots == 0 || self.n_ground() == 0 || self.n_calibration() == 0 {
            return Err(Error::InvalidArgument("shot counts must be ≥ 1".into()));
        }
        if !(self.residual_thermal >= 0.0) {
            return Err(Error::InvalidArgument("residual thermal occupation must be ≥ 0".into()));
        }
        self.device.validate()?;
        self.chain.validate()?;
        self.mle.validate()?;
        let n = self.device.n_qubits();
        match self.scenario {
            Scenario::Noon3l4 | Scenario::PartitionL2 => {
                if self.cutoff < 2 || n > self.cutoff {
                    return Err(Error::TooManyExcitations {
                        excited: n,
                        cutoff: self.cutoff,
                    });
                }
                if self.mle.cutoff < n {
                    return Err(Error::InvalidArgument("MLE cutoff below the photon number".into()));
                }
            }
            Scenario::SpectroscopyFit => {
                if n != 1 {
                    return Err(Error::InvalidArgument("spectroscopy needs a single-qubit device".into()));
                }
                let s = &self.spectroscopy;
                if s.n_detuning < 5 || s.n_power < 5 || s.cross_check_points < 2 {
                    return Err(Error::InvalidArgument("spectroscopy grids need ≥ 5 points per axis".into()));
                }
                if !(s.guess_factor > 0.0) || !(s.noise_sigma >= 0.0) || !(s.power_dbm_max > s.power_dbm_min) {
                    return Err(Error::InvalidArgument("invalid spectroscopy settings".into()));
                }
                if !(self.device.gamma_phi > 0.0 && self.device.n_th > 0.0) {
                    return Err(Error::InvalidArgument(
                        "spectroscopy needs γ_φ > 0 and n_th > 0 to fit in log space".into(),
                    ));
                }
            }
            Scenario::DynamicsCheck => {
                let d = &self.dynamics;
                if d.n_times < 2 || d.coincidence_grid < 2 || d.trace_averages == 0 || !(d.f_d > 0.0) {
                    return Err(Error::InvalidArgument("invalid dynamics settings".into()));
                }
            }
            Scenario::GainCalibration => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the configuration without the
    /// output directory.
    pub fn hash(&self) -> String {
        let mut echo = self.clone();
        echo.output_dir = None;
        let text = serde_json::to_string(&echo).expect("configuration serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Independent seed for one stage, derived from the run seed by SplitMix64.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

mod stream {
    pub const SIGNAL: u64 = 1;
    pub const GROUND: u64 = 2;
    pub const CALIBRATION: u64 = 3;
    pub const MLE: u64 = 4;
    pub const SPECTROSCOPY: u64 = 5;
    pub const TRACES: u64 = 6;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub basis: Vec<String>,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl MatrixRecord {
    fn from_state(state: &TwoModeState) -> Self {
        let space = state.space();
        let m = state.rho().matrix();
        let d = space.dim();
        Self {
            basis: (0..d).map(|i| space.basis_label(i)).collect(),
            re: (0..d).map(|i| (0..d).map(|j| m[(i, j)].re).collect()).collect(),
            im: (0..d).map(|i| (0..d).map(|j| m[(i, j)].im).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub nominal_gains: [f64; 2],
    /// Gains from the calibration batch against the chain's stated noise.
    pub calibrated_gains: [f64; 2],
    pub relative_errors: [f64; 2],
    /// Gains with the noise level re-estimated from the ground batch at
    /// each trial gain (no prior knowledge of either).
    pub joint_gains: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleSummary {
    pub cost: f64,
    pub duality_gap: f64,
    pub residual_rms: f64,
    pub error_floor: f64,
    pub restarts_converged: usize,
    pub within_three_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyResults {
    /// Moments of the noiseless emitted state (the ideal frame).
    pub ideal_moments: MomentTable,
    pub inverted_moments: MomentTable,
    pub noise_moments: MomentTable,
    pub calibration: Option<CalibrationSummary>,
    pub gains_used: [f64; 2],
    pub efficiency: [NoiseFitResult; 2],
    pub rho: MatrixRecord,
    pub fidelity: f64,
    pub vacuum_population: f64,
    pub purity: f64,
    pub mle: MleSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCalibrationResults {
    pub calibration: CalibrationSummary,
    pub efficiency: [NoiseFitResult; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyFitSummary {
    pub seed: u64,
    /// Relative errors of (γ, γ_φ, n_th).
    pub relative_errors: [f64; 3],
    pub params: SpectroscopyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroscopyResults {
    pub truth: SpectroscopyParams,
    pub noiseless_fit: S21Fit,
    pub noiseless_relative_errors: [f64; 3],
    pub noisy_fits: Vec<NoisyFitSummary>,
    pub worst_noisy_relative_errors: [f64; 3],
    pub temperature_k: f64,
    pub fitted_temperature_k: f64,
    /// Largest |S21_ME − S21_model| over the cross-check grid.
    pub master_equation_max_deviation: f64,
    /// |S21(δω=0)|² at the lowest and highest grid power.
    pub saturation_endpoints: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsResults {
    pub times: Vec<f64>,
    pub flux_left: Vec<f64>,
    pub flux_right: Vec<f64>,
    pub total_excitation: Vec<f64>,
    pub photon_number: [f64; 2],
    /// Cross coincidence with waveguide exchange dropped, as in the static
    /// emission picture.
    pub coincidence_without_exchange: f64,
    /// Cross coincidence with the exchange Hamiltonian kept.
    pub coincidence_with_exchange: f64,
    /// `|c₁₁|²` of the static emitted state (two-qubit devices).
    pub coincidence_static: Option<f64>,
    pub decay_matrix_eigenvalues: Vec<f64>,
    pub trace_times: Vec<f64>,
    pub trace_excited: Vec<f64>,
    pub trace_superposition: Vec<f64>,
    pub fitted_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioResults {
    Tomography(Box<TomographyResults>),
    GainCalibration(GainCalibrationResults),
    Spectroscopy(Box<SpectroscopyResults>),
    Dynamics(Box<DynamicsResults>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub wqed: String,
    pub schema: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub config_hash: String,
    pub seed: u64,
    /// The configuration, without the output directory.
    pub config: ScenarioConfig,
    pub versions: Versions,
    pub results: ScenarioResults,
    /// Wall-clock time per stage; the only non-deterministic field.
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON without the timing field: identical for identical configs.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timings.clear();
        copy.to_json()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn tomography(&self) -> Option<&TomographyResults> {
        match &self.results {
            ScenarioResults::Tomography(t) => Some(t),
            _ => None,
        }
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scenario    {}", self.scenario.name());
        let _ = writeln!(out, "config hash {}", self.config_hash);
        let _ = writeln!(out, "seed        {}", self.seed);
        match &self.results {
            ScenarioResults::Tomography(t) => {
                let _ = writeln!(out, "fidelity    {:.4}", t.fidelity);
                let _ = writeln!(out, "<00|rho|00> {:.4}", t.vacuum_population);
                let _ = writeln!(out, "purity      {:.4}", t.purity);
                let _ = writeln!(out, "eta L/R     {:.4} / {:.4}", t.efficiency[0].eta, t.efficiency[1].eta);
                let _ = writeln!(out, "gains used  {:.6e} / {:.6e}", t.gains_used[0], t.gains_used[1]);
            }
            ScenarioResults::GainCalibration(g) => {
                let c = &g.calibration;
                let _ = writeln!(out, "nominal     {:.6e} / {:.6e}", c.nominal_gains[0], c.nominal_gains[1]);
                let _ = writeln!(out, "calibrated  {:.6e} / {:.6e}", c.calibrated_gains[0], c.calibrated_gains[1]);
                let _ = writeln!(
                    out,
                    "rel. error  {:.3e} / {:.3e}",
                    c.relative_errors[0], c.relative_errors[1]
                );
                let _ = writeln!(out, "joint       {:.6e} / {:.6e}", c.joint_gains[0], c.joint_gains[1]);
            }
            ScenarioResults::Spectroscopy(s) => {
                let p = &s.noiseless_fit.params;
                let tau = 2.0 * std::f64::consts::PI;
                let _ = writeln!(
                    out,
                    "fit         γ/2π = {:.6e} Hz, γφ/2π = {:.6e} Hz, n_th = {:.6e}",
                    p.gamma / tau,
                    p.gamma_phi / tau,
                    p.n_th
                );
                let w = s.worst_noisy_relative_errors;
                let _ = writeln!(out, "worst noisy {:.3e} / {:.3e} / {:.3e}", w[0], w[1], w[2]);
                let _ = writeln!(out, "temperature {:.2} mK", 1e3 * s.fitted_temperature_k);
                let _ = writeln!(out, "ME check    {:.3e}", s.master_equation_max_deviation);
            }
            ScenarioResults::Dynamics(d) => {
                let _ = writeln!(out, "photons L/R {:.5} / {:.5}", d.photon_number[0], d.photon_number[1]);
                let _ = writeln!(out, "coincidence {:.5} (exchange kept: {:.5})", d.coincidence_without_exchange, d.coincidence_with_exchange);
                if let Some(c) = d.coincidence_static {
                    let _ = writeln!(out, "static      {c:.5}");
                }
                let _ = writeln!(out, "fitted γ    {:.6e} rad/s", d.fitted_gamma);
            }
        }
        for t in &self.timings {
            let _ = writeln!(out, "  {:<12} {:.3} s", t.stage, t.seconds);
        }
        out
    }
}

/// A file produced by a run, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

/// Report plus the artifacts written next to it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: Vec<Artifact>,
}

struct Stages {
    hash: String,
    timings: Vec<StageTiming>,
}

impl Stages {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| Error::Stage {
            stage: name.into(),
            config_hash: self.hash.clone(),
            source: Box::new(e),
        })?;
        self.timings.push(StageTiming {
            stage: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn records_artifact(name: &str, batch: &RecordBatch) -> Result<Artifact> {
    let mut contents = Vec::new();
    batch.write_binary(&mut contents)?;
    Ok(Artifact {
        name: name.into(),
        contents,
    })
}

fn rel_err(estimate: f64, truth: f64) -> f64 {
    (estimate / truth - 1.0).abs()
}

/// Calibration-state emission `(|g⟩ + |e⟩)/√2` of qubit 0 of the device.
fn calibration_state(device: &EmitterConfig) -> Result<TwoModeState> {
    let mut prep = vec![QubitState::Ground; device.n_qubits()];
    prep[0] = QubitPreparation::equal_superposition().0[0];
    let setup = EmissionSetup {
        config: device.clone(),
        prep: QubitPreparation(prep),
        active: vec![0],
        cutoff: 2,
    };
    setup.emitted_state()
}

fn thermal_correction(cfg: &ScenarioConfig) -> Option<f64> {
    (cfg.residual_thermal > 0.0).then_some(cfg.residual_thermal)
}

/// Calibrate both chains from a calibration batch, using the stated
/// (input-referred) noise of the chain for the √2 relation and reporting the
/// fully self-consistent estimate alongside.
fn calibrate_chains(
    cfg: &ScenarioConfig,
    cal: &MomentAccumulator,
    ground: &MomentAccumulator,
) -> Result<CalibrationSummary> {
    let noise_model = MomentTable::thermal(PIPELINE_ORDER, MomentKind::NoiseH, cfg.chain.n_noise_l, cfg.chain.n_noise_r);
    let sides = [Direction::Left, Direction::Right];
    let calibrated = sides.map(|side| calibrate_gain_in(cal, &noise_model, side, GAIN_BRACKET));
    let joint = sides.map(|side| calibrate_gain_joint(cal, ground, side, thermal_correction(cfg), GAIN_BRACKET));
    let [cl, cr] = calibrated;
    let [jl, jr] = joint;
    let calibrated_gains = [cl?, cr?];
    let nominal = cfg.chain.gains();
    Ok(CalibrationSummary {
        nominal_gains: nominal,
        relative_errors: [
            rel_err(calibrated_gains[0], nominal[0]),
            rel_err(calibrated_gains[1], nominal[1]),
        ],
        calibrated_gains,
        joint_gains: [jl?, jr?],
    })
}

fn efficiencies(noise: &MomentTable) -> Result<[NoiseFitResult; 2]> {
    Ok([
        fit_noise_thermal(noise, Direction::Left)?,
        fit_noise_thermal(noise, Direction::Right)?,
    ])
}

/// Identical for every multi-emitter geometry: emit, detect, calibrate,
/// invert, reconstruct.
fn run_tomography(cfg: &ScenarioConfig, stages: &mut Stages, artifacts: &mut Vec<Artifact>) -> Result<ScenarioResults> {
    let n = cfg.device.n_qubits();
    let setup = |cutoff: usize| EmissionSetup {
        config: cfg.device.clone(),
        prep: QubitPreparation::all_excited(n),
        active: (0..n).collect(),
        cutoff,
    };
    let (state, ideal_moments, ideal_target) = stages.run("generate", || {
        let state = match &cfg.imperfection {
            Some(model) => apply_imperfection(&setup(cfg.cutoff), model)?,
            None => setup(cfg.cutoff).emitted_state()?,
        };
        // enough headroom for every order-2 moment of an n-photon state
        let ideal = setup(n + PIPELINE_ORDER).emitted_state()?;
        let moments = MomentTable::from_fn(PIPELINE_ORDER, MomentKind::SignalA, |p| {
            expect_moment(&ideal, p).unwrap_or(C64::new(f64::NAN, f64::NAN))
        })?;
        if moments.entries().iter().any(|v| v.re.is_nan()) {
            return Err(Error::InvalidArgument("ideal moments out of range".into()));
        }
        Ok((state, moments, setup(cfg.mle.cutoff).emitted_state()?))
    })?;

    let (signal, ground) = stages.run("sample", || {
        let signal = sample_records(&state, &cfg.chain, cfg.n_shots, derive_seed(cfg.seed, stream::SIGNAL), PrepLabel::Signal)?;
        let ground_state = ground_reference_state(cfg.cutoff, cfg.residual_thermal)?;
        let ground = sample_records(
            &ground_state,
            &cfg.chain,
            cfg.n_ground(),
            derive_seed(cfg.seed, stream::GROUND),
            PrepLabel::Ground,
        )?;
        Ok((signal, ground))
    })?;
    if cfg.save_records {
        artifacts.push(records_artifact("signal_records.wqr", &signal)?);
        artifacts.push(records_artifact("ground_records.wqr", &ground)?);
    }
    let (s_acc, g_acc) = stages.run("accumulate", || {
        Ok((
            MomentAccumulator::from_batch(&signal, PIPELINE_ORDER)?,
            MomentAccumulator::from_batch(&ground, PIPELINE_ORDER)?,
        ))
    })?;
    drop(signal);
    drop(ground);

    let calibration = if cfg.calibrate {
        Some(stages.run("calibrate", || {
            let cal_state = calibration_state(&cfg.device)?;
            let cal = sample_records(
                &cal_state,
                &cfg.chain,
                cfg.n_calibration(),
                derive_seed(cfg.seed, stream::CALIBRATION),
                PrepLabel::Calibration,
            )?;
            if cfg.save_records {
                artifacts.push(records_artifact("calibration_records.wqr", &cal)?);
            }
            let cal_acc = MomentAccumulator::from_batch(&cal, PIPELINE_ORDER)?;
            calibrate_chains(cfg, &cal_acc, &g_acc)
        })?)
    } else {
        None
    };
    let gains = calibration
        .as_ref()
        .map(|c| c.calibrated_gains)
        .unwrap_or_else(|| cfg.chain.gains());

    let (inverted, noise) = stages.run("invert", || {
        let corr = thermal_correction(cfg);
        let inverted = invert_with_errors(&s_acc, gains, &g_acc, gains, corr)?;
        let noise = noise_moments_from(&g_acc, gains, corr)?;
        Ok((inverted, noise))
    })?;
    let efficiency = stages.run("efficiency", || efficiencies(&noise))?;

    let mle = stages.run("mle", || {
        let mut mle_cfg = cfg.mle;
        mle_cfg.seed = derive_seed(cfg.seed, stream::MLE);
        mle_density_matrix(&inverted, &mle_cfg)
    })?;
    let (fid, vacuum_population) = stages.run("fidelity", || {
        Ok((fidelity(mle.rho(), ideal_target.rho())?, mle.state.population(0, 0)?))
    })?;
    artifacts.push(Artifact {
        name: "rho.json".into(),
        contents: density_matrix_json(&mle.state)?.into_bytes(),
    });
    Ok(ScenarioResults::Tomography(Box::new(TomographyResults {
        ideal_moments,
        inverted_moments: inverted,
        noise_moments: noise,
        calibration,
        gains_used: gains,
        efficiency,
        rho: MatrixRecord::from_state(&mle.state),
        fidelity: fid,
        vacuum_population,
        purity: mle.rho().purity(),
        mle: MleSummary {
            cost: mle.cost,
            duality_gap: mle.duality_gap,
            residual_rms: mle.residual_rms,
            error_floor: mle.error_floor,
            restarts_converged: mle.restarts_converged,
            within_three_sigma: mle.within_three_sigma,
        },
    })))
}

fn run_gain_calibration(cfg: &ScenarioConfig, stages: &mut Stages, artifacts: &mut Vec<Artifact>) -> Result<ScenarioResults> {
    let (cal, ground) = stages.run("sample", || {
        let cal_state = calibration_state(&cfg.device)?;
        let cal = sample_records(&cal_state, &cfg.chain, cfg.n_shots, derive_seed(cfg.seed, stream::CALIBRATION), PrepLabel::Calibration)?;
        let ground_state = ground_reference_state(2, cfg.residual_thermal)?;
        let ground = sample_records(&ground_state, &cfg.chain, cfg.n_ground(), derive_seed(cfg.seed, stream::GROUND), PrepLabel::Ground)?;
        Ok((cal, ground))
    })?;
    if cfg.save_records {
        artifacts.push(records_artifact("calibration_records.wqr", &cal)?);
        artifacts.push(records_artifact("ground_records.wqr", &ground)?);
    }
    let (cal_acc, g_acc) = stages.run("accumulate", || {
        Ok((
            MomentAccumulator::from_batch(&cal, PIPELINE_ORDER)?,
            MomentAccumulator::from_batch(&ground, PIPELINE_ORDER)?,
        ))
    })?;
    let calibration = stages.run("calibrate", || calibrate_chains(cfg, &cal_acc, &g_acc))?;
    let efficiency = stages.run("efficiency", || {
        let noise = noise_moments_from(&g_acc, calibration.calibrated_gains, thermal_correction(cfg))?;
        efficiencies(&noise)
    })?;
    Ok(ScenarioResults::GainCalibration(GainCalibrationResults { calibration, efficiency }))
}

fn spectroscopy_truth(device: &EmitterConfig) -> SpectroscopyParams {
    SpectroscopyParams {
        gamma: device.gamma,
        gamma_phi: device.gamma_phi,
        n_th: device.n_th,
        omega: device.omega,
    }
}

fn relative_errors(fit: &SpectroscopyParams, truth: &SpectroscopyParams) -> [f64; 3] {
    [
        rel_err(fit.gamma, truth.gamma),
        rel_err(fit.gamma_phi, truth.gamma_phi),
        rel_err(fit.n_th, truth.n_th),
    ]
}

fn run_spectroscopy(cfg: &ScenarioConfig, stages: &mut Stages, artifacts: &mut Vec<Artifact>) -> Result<ScenarioResults> {
    let s = cfg.spectroscopy;
    let truth = spectroscopy_truth(&cfg.device);
    truth.validate()?;
    let (det, pow) = standard_grids(s.half_span_hz, s.n_detuning, s.power_dbm_min, s.power_dbm_max, s.n_power);
    let guess = SpectroscopyParams {
        gamma: truth.gamma * s.guess_factor,
        gamma_phi: truth.gamma_phi * s.guess_factor,
        n_th: truth.n_th * s.guess_factor,
        omega: truth.omega,
    };
    let opts = FitOptions::default();
    let base_seed = derive_seed(cfg.seed, stream::SPECTROSCOPY);

    let noiseless_fit = stages.run("fit_noiseless", || {
        let data = synth_dataset(&truth, &det, &pow, 0.0, base_seed)?;
        fit_s21(&data, &guess, &opts)
    })?;
    let noisy_fits = stages.run("fit_noisy", || {
        (0..s.n_noise_seeds as u64)
            .map(|k| {
                let seed = derive_seed(base_seed, k);
                let data = synth_dataset(&truth, &det, &pow, s.noise_sigma, seed)?;
                if k == 0 {
                    artifacts.push(Artifact {
                        name: "s21_dataset.csv".into(),
                        contents: data.to_csv().into_bytes(),
                    });
                }
                let fit = fit_s21(&data, &truth, &opts)?;
                Ok(NoisyFitSummary {
                    seed,
                    relative_errors: relative_errors(&fit.params, &truth),
                    params: fit.params,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut worst = [0.0f64; 3];
    for f in &noisy_fits {
        for k in 0..3 {
            worst[k] = worst[k].max(f.relative_errors[k]);
        }
    }
    let me_dev = stages.run("cross_check", || {
        let n = s.cross_check_points;
        let (cd, cp) = standard_grids(s.half_span_hz * 0.75, n, s.power_dbm_min, s.power_dbm_max, n);
        let mut worst: f64 = 0.0;
        for &d in &cd {
            for &p in &cp {
                worst = worst.max((s21_master_equation(&truth, d, p)? - s21_model(&truth, d, p)).norm());
            }
        }
        Ok(worst)
    })?;
    artifacts.push(Artifact {
        name: "fit_report.json".into(),
        contents: noiseless_fit.to_json()?.into_bytes(),
    });
    Ok(ScenarioResults::Spectroscopy(Box::new(SpectroscopyResults {
        noiseless_relative_errors: relative_errors(&noiseless_fit.params, &truth),
        temperature_k: thermal_occupation_to_temperature(truth.n_th, truth.omega)?,
        fitted_temperature_k: thermal_occupation_to_temperature(noiseless_fit.params.n_th, truth.omega)?,
        truth,
        noiseless_fit,
        noisy_fits,
        worst_noisy_relative_errors: worst,
        master_equation_max_deviation: me_dev,
        saturation_endpoints: [
            s21_model(&truth, 0.0, pow[0]).norm_sqr(),
            s21_model(&truth, 0.0, pow[pow.len() - 1]).norm_sqr(),
        ],
    })))
}

fn coincidence(cfg: &ScenarioConfig, exchange: ExchangeTreatment, horizon: f64) -> Result<f64> {
    let n = cfg.device.n_qubits();
    let gen = build_generator_with(&cfg.device, None, exchange)?;
    let rho0 = excited_register(n, &(0..n).collect::<Vec<_>>())?;
    cross_coincidence_g2(&gen, &cfg.device, &rho0, horizon, cfg.dynamics.coincidence_grid)
}

fn run_dynamics(cfg: &ScenarioConfig, stages: &mut Stages) -> Result<ScenarioResults> {
    let d = cfg.dynamics;
    let n = cfg.device.n_qubits();
    let gamma = cfg.device.gamma;
    let horizon = d.horizon_gamma_times / gamma;
    let times: Vec<f64> = (0..d.n_times).map(|k| horizon * k as f64 / (d.n_times - 1) as f64).collect();
    let gen: LindbladGenerator = build_generator_with(&cfg.device, None, ExchangeTreatment::Full)?;
    let traj = stages.run("evolve", || {
        let rho0 = excited_register(n, &(0..n).collect::<Vec<_>>())?;
        evolve(&rho0, &gen, &times)
    })?;
    let (flux_left, flux_right, photon_number, total_excitation) = stages.run("observables", || {
        let left = output_flux(&traj, &cfg.device, Direction::Left)?;
        let right = output_flux(&traj, &cfg.device, Direction::Right)?;
        let photons = [
            integrated_photon_number(&traj, &cfg.device, Direction::Left)?,
            integrated_photon_number(&traj, &cfg.device, Direction::Right)?,
        ];
        let ops: Vec<_> = (0..n)
            .map(|j| crate::dynamics::excitation_operator(j, n))
            .collect::<Result<_>>()?;
        let total = traj
            .states
            .iter()
            .map(|rho| ops.iter().map(|op| rho.expect(op).map(|v| v.re)).sum::<Result<f64>>())
            .collect::<Result<Vec<_>>>()?;
        Ok((left, right, photons, total))
    })?;
    let (without, with) = stages.run("coincidence", || {
        Ok((
            coincidence(cfg, ExchangeTreatment::Neglected, horizon)?,
            coincidence(cfg, ExchangeTreatment::Full, horizon)?,
        ))
    })?;
    let coincidence_static = (n == 2).then(|| {
        let dx = (cfg.device.positions[1] - cfg.device.positions[0]) / cfg.device.wavelength();
        noon_coefficients(dx).2.norm_sqr()
    });
    let mut eig: Vec<f64> = gen.decay_matrix().symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));

    let (trace_times, trace_excited, trace_superposition, fitted_gamma) = stages.run("time_traces", || {
        let params = TimeTraceParams::new(gamma, d.f_d, d.trace_noise)?;
        let dt = 1.0 / (8.0 * d.f_d);
        let n_pts = ((8.0 / gamma) / dt).ceil() as usize;
        let t: Vec<f64> = (0..n_pts).map(|k| k as f64 * dt).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, stream::TRACES));
        let excited = synth_time_trace(&QubitState::Excited, &params, &t, d.trace_averages, &mut rng)?;
        let sup = synth_time_trace(
            &QubitPreparation::equal_superposition().0[0],
            &params,
            &t,
            d.trace_averages,
            &mut rng,
        )?;
        let fit = fit_envelope_decay(&t, &sup, d.f_d, (gamma / 10.0, gamma * 10.0))?;
        Ok((t, excited, sup, fit.gamma))
    })?;
    Ok(ScenarioResults::Dynamics(Box::new(DynamicsResults {
        times,
        flux_left,
        flux_right,
        total_excitation,
        photon_number,
        coincidence_without_exchange: without,
        coincidence_with_exchange: with,
        coincidence_static,
        decay_matrix_eigenvalues: eig,
        trace_times,
        trace_excited,
        trace_superposition,
        fitted_gamma,
    })))
}

/// Run a scenario in memory. Nothing is written to disk.
pub fn execute(cfg: &ScenarioConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut stages = Stages {
        hash: hash.clone(),
        timings: Vec::new(),
    };
    let mut artifacts = Vec::new();
    let results = match cfg.scenario {
        Scenario::Noon3l4 | Scenario::PartitionL2 => run_tomography(cfg, &mut stages, &mut artifacts)?,
        Scenario::GainCalibration => run_gain_calibration(cfg, &mut stages, &mut artifacts)?,
        Scenario::SpectroscopyFit => run_spectroscopy(cfg, &mut stages, &mut artifacts)?,
        Scenario::DynamicsCheck => run_dynamics(cfg, &mut stages)?,
    };
    let mut echo = cfg.clone();
    echo.output_dir = None;
    let report = RunReport {
        scenario: cfg.scenario,
        config_hash: hash,
        seed: cfg.seed,
        config: echo,
        versions: Versions {
            wqed: env!("CARGO_PKG_VERSION").into(),
            schema: SCHEMA_VERSION,
        },
        results,
        timings: stages.timings,
    };
    Ok(RunOutput { report, artifacts })
}

/// Marker written into a run directory while a run is in progress and
/// replaced by `FAILED.json` when a stage fails.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const FAILED_MARKER: &str = "FAILED.json";

/// Run a scenario and, when `cfg.output_dir` is set, write the report, the
/// artifacts and the plot data there. A failed run leaves `FAILED.json`
/// naming the stage and configuration hash.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport> {
    let Some(dir) = cfg.output_dir.clone() else {
        return execute(cfg).map(|o| o.report);
    };
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join(FAILED_MARKER));
    let hash = cfg.hash();
    fs::write(dir.join(INCOMPLETE_MARKER), format!("config_hash={hash}\n"))?;
    match execute(cfg) {
        Ok(out) => {
            write_outputs(&dir, &out)?;
            fs::remove_file(dir.join(INCOMPLETE_MARKER))?;
            Ok(out.report)
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => "setup".into(),
            };
            let marker = serde_json::json!({
                "status": "failed",
                "stage": stage,
                "config_hash": hash,
                "error": e.to_string(),
            });
            fs::write(dir.join(FAILED_MARKER), serde_json::to_string_pretty(&marker)?)?;
            fs::remove_file(dir.join(INCOMPLETE_MARKER))?;
            Err(e)
        }
    }
}

fn tagged_csv(hash: &str, body: &str) -> Vec<u8> {
    format!("# config_hash={hash}\n{body}").into_bytes()
}

fn tagged_json(hash: &str, body: &str) -> Result<Vec<u8>> {
    let mut value: serde_json::Value = serde_json::from_str(body)?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("config_hash".into(), serde_json::Value::String(hash.into()));
    }
    Ok(serde_json::to_string_pretty(&value)?.into_bytes())
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    let hash = &out.report.config_hash;
    let mut names = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        fs::write(dir.join(name), bytes)?;
        names.push(name.to_string());
        Ok(())
    };
    put("report.json", out.report.to_json()?.into_bytes())?;
    for a in &out.artifacts {
        let bytes = if a.name.ends_with(".csv") {
            tagged_csv(hash, &String::from_utf8_lossy(&a.contents))
        } else if a.name.ends_with(".json") {
            tagged_json(hash, &String::from_utf8_lossy(&a.contents))?
        } else {
            a.contents.clone()
        };
        put(&a.name, bytes)?;
    }
    for (name, body) in emit_plot_data(&out.report)? {
        let bytes = if name.ends_with(".json") {
            tagged_json(hash, &body)?
        } else {
            tagged_csv(hash, &body)
        };
        put(&name, bytes)?;
    }
    // binary record files carry the hash through the manifest
    let manifest = serde_json::json!({ "config_hash": hash, "files": names });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn matrix_csv(basis: &[String], m: &[Vec<f64>]) -> String {
    let mut out = String::from("row");
    for b in basis {
        let _ = write!(out, ",{b}");
    }
    out.push('\n');
    for (label, row) in basis.iter().zip(m) {
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{v:.9e}");
        }
        out.push('\n');
    }
    out
}

/// Plot-ready data behind the report: moment bars with ideal frames, ρ̂
/// real/imaginary grids, time-resolved fluxes and averaged voltage traces,
/// as `(file name, contents)` pairs.
pub fn emit_plot_data(report: &RunReport) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    match &report.results {
        ScenarioResults::Tomography(t) => {
            let mut csv = String::from("w,x,y,z,re,im,stderr,ideal_re,ideal_im\n");
            let idx = t.inverted_moments.indexing();
            for (i, p) in idx.iter().enumerate() {
                let m = t.inverted_moments.entries()[i];
                let ideal = t.ideal_moments.get(p)?;
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{:.9e},{:.9e},{:.3e},{:.9e},{:.9e}",
                    p.w,
                    p.x,
                    p.y,
                    p.z,
                    m.re,
                    m.im,
                    t.inverted_moments.stderrs()[i],
                    ideal.re,
                    ideal.im
                );
            }
            files.push(("moments_plot.csv".into(), csv));
            files.push(("moments_inverted.json".into(), t.inverted_moments.to_json()?));
            files.push(("moments_noise.json".into(), t.noise_moments.to_json()?));
            files.push(("rho_re.csv".into(), matrix_csv(&t.rho.basis, &t.rho.re)));
            files.push(("rho_im.csv".into(), matrix_csv(&t.rho.basis, &t.rho.im)));
        }
        ScenarioResults::Dynamics(d) => {
            let mut csv = String::from("t,flux_l,flux_r,total_rate,total_excitation\n");
            for k in 0..d.times.len() {
                let _ = writeln!(
                    csv,
                    "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                    d.times[k],
                    d.flux_left[k],
                    d.flux_right[k],
                    d.flux_left[k] + d.flux_right[k],
                    d.total_excitation[k]
                );
            }
            files.push(("flux.csv".into(), csv));
            let mut trace = String::from("t,v_excited,v_superposition\n");
            for k in 0..d.trace_times.len() {
                let _ = writeln!(
                    trace,
                    "{:.9e},{:.9e},{:.9e}",
                    d.trace_times[k], d.trace_excited[k], d.trace_superposition[k]
                );
            }
            files.push(("time_trace.csv".into(), trace));
        }
        ScenarioResults::Spectroscopy(s) => {
            let mut csv = String::from("seed,rel_err_gamma,rel_err_gamma_phi,rel_err_n_th\n");
            for f in &s.noisy_fits {
                let e = f.relative_errors;
                let _ = writeln!(csv, "{},{:.6e},{:.6e},{:.6e}", f.seed, e[0], e[1], e[2]);
            }
            files.push(("noisy_fits.csv".into(), csv));
        }
        ScenarioResults::GainCalibration(g) => {
            let c = &g.calibration;
            let mut csv = String::from("side,nominal,calibrated,relative_error,joint,eta\n");
            for (k, side) in ["L", "R"].iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{side},{:.9e},{:.9e},{:.6e},{:.9e},{:.6e}",
                    c.nominal_gains[k], c.calibrated_gains[k], c.relative_errors[k], c.joint_gains[k], g.efficiency[k].eta
                );
            }
            files.push(("calibration.csv".into(), csv));
        }
    }
    Ok(files)
}

/// Outcome of one quick invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> SelfTestResult {
    match f() {
        Ok((passed, detail)) => SelfTestResult {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => SelfTestResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Fast in-process invariant checks of every stage (a few seconds).
pub fn selftest() -> Vec<SelfTestResult> {
    use crate::fock::Powers;
    use crate::moments::{build_h_matrix, compose_moments, invert_moments};
    let noon = || {
        EmissionSetup {
            config: EmitterConfig::noon_device(),
            prep: QubitPreparation::all_excited(2),
            active: vec![0, 1],
            cutoff: 4,
        }
        .emitted_state()
    };
    vec![
        check("ideal N00N moments", || {
            let s = noon()?;
            let cross = expect_moment(&s, Powers::new(0, 2, 2, 0))?;
            let nl = expect_moment(&s, Powers::new(1, 1, 0, 0))?;
            let ok = (cross - C64::new(-1.0, 0.0)).norm() < 1e-12 && (nl.re - 1.0).abs() < 1e-12;
            Ok((ok, format!("<a_L^2 a_R^+2> = {cross:.3e}, <n_L> = {:.3e}", nl.re)))
        }),
        check("moment inversion round trip", || {
            let s = noon()?;
            let signal = MomentTable::from_fn(2, MomentKind::SignalA, |p| expect_moment(&s, p).unwrap_or_default())?;
            let noise = MomentTable::thermal(2, MomentKind::NoiseH, 1.0, 8.0);
            let composed = compose_moments(&signal, &noise)?;
            let back = invert_moments(&composed, &build_h_matrix(&noise, 2)?)?;
            let err = back
                .entries()
                .iter()
                .zip(signal.entries())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            Ok((err < 1e-10, format!("max deviation {err:.2e}")))
        }),
        check("single-emitter decay", || {
            let cfg = EmitterConfig::single_qubit(2.0 * std::f64::consts::PI * 4.85e9, 1e6);
            let gen = build_generator_with(&cfg, None, ExchangeTreatment::Full)?;
            let traj = evolve(&excited_register(1, &[0])?, &gen, &[0.0, 2e-6])?;
            let pe = traj.states[1].expect(&crate::dynamics::excitation_operator(0, 1)?)?.re;
            let err = (pe - (-2.0f64).exp()).abs();
            Ok((err < 1e-6, format!("p_e(2/γ) deviation {err:.2e}")))
        }),
        check("transmission vs steady state", || {
            let p = SpectroscopyParams::device();
            let pw = crate::spectroscopy::dbm_to_watts(-135.0);
            let dev = (s21_master_equation(&p, 1e6, pw)? - s21_model(&p, 1e6, pw)).norm();
            Ok((dev < 1e-6, format!("|ΔS21| = {dev:.2e}")))
        }),
        check("thermal temperature", || {
            let t = thermal_occupation_to_temperature(0.006, 2.0 * std::f64::consts::PI * 4.85e9)?;
            Ok(((0.045..=0.046).contains(&t), format!("{:.2} mK", 1e3 * t)))
        }),
        check("moment-matching reconstruction", || {
            let s = noon()?;
            let table = MomentTable::from_fn(2, MomentKind::SignalA, |p| expect_moment(&s, p).unwrap_or_default())?;
            let res = mle_density_matrix(&table, &MLEConfig::default())?;
            let target = s.embed(3)?;
            let f = fidelity(res.rho(), target.rho())?;
            Ok((f >= 0.999, format!("fidelity {f:.5}")))
        }),
    ]
}

/// Default location of run directories when no output is given.
pub fn default_output_dir(cfg: &ScenarioConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}", cfg.scenario.name(), &cfg.hash()[..12]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(scenario: Scenario) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::preset(scenario);
        cfg.n_shots = 40_000;
        cfg.chain = AmplifierChainParams::symmetric(10.0, 0.5).unwrap();
        cfg.spectroscopy.n_detuning = 41;
        cfg.spectroscopy.n_power = 18;
        cfg.spectroscopy.n_noise_seeds = 2;
        cfg.dynamics.coincidence_grid = 200;
        cfg.dynamics.trace_averages = 50;
        cfg
    }

    #[test]
    fn config_round_trips_and_hash_ignores_output_dir() {
        for s in Scenario::ALL {
            let cfg = ScenarioConfig::preset(s);
            let text = cfg.to_json().unwrap();
            assert!(text.contains(&format!("\"{}\"", s.name())));
            let back = ScenarioConfig::from_json(&text).unwrap();
            assert_eq!(back, cfg);
            let mut moved = cfg.clone();
            moved.output_dir = Some("/tmp/elsewhere".into());
            assert_eq!(moved.hash(), cfg.hash());
            assert_eq!(cfg.hash().len(), 64);
        }
        let mut other = ScenarioConfig::preset(Scenario::Noon3l4);
        other.seed += 1;
        assert_ne!(other.hash(), ScenarioConfig::preset(Scenario::Noon3l4).hash());
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let text = r#"{
            "scenario": "noon_3l4",
            "device": {"positions": [0.0, 0.01855], "omega": 3.047e10, "v": 1.2e8, "gamma": 3.33e6},
            "chain": {"gain_l": 1e4, "gain_r": 1e4, "n_noise_l": 1.0, "n_noise_r": 1.0},
            "n_shots": 1000,
            "seed": 3
        }"#;
        let cfg = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(cfg.cutoff, 3);
        assert_eq!(cfg.n_ground(), 1000);
        assert!(cfg.calibrate);
        assert_eq!(cfg.mle, MLEConfig::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ScenarioConfig::preset(Scenario::Noon3l4);
        cfg.n_shots = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::preset(Scenario::Noon3l4);
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::preset(Scenario::SpectroscopyFit);
        cfg.device = EmitterConfig::noon_device();
        assert!(cfg.validate().is_err());
        assert!(ScenarioConfig::from_json(r#"{"scenario": "noon_3l4"}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"scenario": "nope"}"#).is_err());
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let seeds: Vec<u64> = (0..6).map(|k| derive_seed(1, k)).collect();
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(derive_seed(7, 2), derive_seed(7, 2));
    }

    #[test]
    fn small_noon_run_is_deterministic_and_complete() {
        let cfg = small(Scenario::Noon3l4);
        let a = execute(&cfg).unwrap();
        let b = execute(&cfg).unwrap();
        assert_eq!(a.report.canonical_json().unwrap(), b.report.canonical_json().unwrap());
        assert_eq!(a.artifacts, b.artifacts);
        let t = a.report.tomography().unwrap();
        assert!(t.fidelity > 0.5, "{}", t.fidelity);
        let stages: Vec<_> = a.report.timings.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(
            stages,
            ["generate", "sample", "accumulate", "calibrate", "invert", "efficiency", "mle", "fidelity"]
        );
        let plot = emit_plot_data(&a.report).unwrap();
        let moments = &plot.iter().find(|(n, _)| n == "moments_plot.csv").unwrap().1;
        let row = moments.lines().find(|l| l.starts_with("0,2,2,0,")).unwrap();
        let ideal_re: f64 = row.split(',').nth(7).unwrap().parse().unwrap();
        assert_abs_diff_eq!(ideal_re, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn dynamics_run_bookkeeping() {
        let cfg = small(Scenario::DynamicsCheck);
        let out = execute(&cfg).unwrap();
        let plot = emit_plot_data(&out.report).unwrap();
        let flux = &plot.iter().find(|(n, _)| n == "flux.csv").unwrap().1;
        for line in flux.lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            assert_abs_diff_eq!(v[1] + v[2], v[3], epsilon = 1e-8 * (1.0 + v[3].abs()));
        }
        let ScenarioResults::Dynamics(d) = &out.report.results else {
            panic!("wrong results")
        };
        assert_abs_diff_eq!(d.coincidence_static.unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.photon_number[0], 1.0, epsilon = 2e-3);
    }

    #[test]
    fn failed_runs_are_marked() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(Scenario::Noon3l4);
        // a chain with no gain headroom inside the bracket cannot calibrate
        cfg.chain = AmplifierChainParams::symmetric(1e13, 0.5).unwrap();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let err = run_scenario(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
        let marker = fs::read_to_string(dir.path().join(FAILED_MARKER)).unwrap();
        assert!(marker.contains(&cfg.hash()));
        assert!(marker.contains("calibrate"));
        assert!(!dir.path().join(INCOMPLETE_MARKER).exists());
        assert!(!dir.path().join("report.json").exists());
    }

    #[test]
    fn successful_runs_write_tagged_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(Scenario::GainCalibration);
        cfg.output_dir = Some(dir.path().to_path_buf());
        cfg.save_records = true;
        let report = run_scenario(&cfg).unwrap();
        let loaded = RunReport::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(loaded.canonical_json().unwrap(), report.canonical_json().unwrap());
        let csv = fs::read_to_string(dir.path().join("calibration.csv")).unwrap();
        assert!(csv.starts_with(&format!("# config_hash={}", report.config_hash)));
        let records = RecordBatch::load(&dir.path().join("calibration_records.wqr")).unwrap();
        assert_eq!(records.len(), cfg.n_shots);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn selftest_passes() {
        for r in selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
