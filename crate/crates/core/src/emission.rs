//! Closed-form photonic states emitted by resonant waveguide-coupled qubits.
//!
//! Each fully excited emitter at position `x_j` contributes the creation
//! operator `(a_L† e^{iωx_j/v} + a_R† e^{-iωx_j/v}) / √2` acting on the
//! vacuum. Exchange between emitters is not part of this picture.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{c, creation, r, DensityMatrix, FockSpace, Operator, StateVector, TwoModeState, C64};

/// Speed of light in the coplanar waveguide used by the presets (m/s).
pub const DEFAULT_WAVEGUIDE_SPEED: f64 = 1.2e8;

/// Relative frequency mismatch above which a qubit counts as detuned.
const RESONANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterConfig {
    /// Qubit positions along the waveguide (m), strictly increasing.
    pub positions: Vec<f64>,
    /// Shared resonance frequency (rad/s).
    pub omega: f64,
    /// Waveguide phase velocity (m/s).
    pub v: f64,
    /// Qubit-waveguide coupling rate γ (rad/s).
    pub gamma: f64,
    /// Pure dephasing rate γ_φ (rad/s).
    #[serde(default)]
    pub gamma_phi: f64,
    /// Thermal occupation of the waveguide bath.
    #[serde(default)]
    pub n_th: f64,
    /// Per-qubit transition frequencies; all equal to `omega` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubit_omegas: Option<Vec<f64>>,
}

impl EmitterConfig {
    /// Two resonant emitters separated by `dx_over_lambda` wavelengths.
    pub fn two_qubit(omega: f64, gamma: f64, dx_over_lambda: f64) -> Self {
        let v = DEFAULT_WAVEGUIDE_SPEED;
        let lambda = 2.0 * PI * v / omega;
        Self {
            positions: vec![0.0, dx_over_lambda * lambda],
            omega,
            v,
            gamma,
            gamma_phi: 0.0,
            n_th: 0.0,
            qubit_omegas: None,
        }
    }

    pub fn single_qubit(omega: f64, gamma: f64) -> Self {
        Self {
            positions: vec![0.0],
            omega,
            v: DEFAULT_WAVEGUIDE_SPEED,
            gamma,
            gamma_phi: 0.0,
            n_th: 0.0,
            qubit_omegas: None,
        }
    }

    /// Q1/Q3 at ω/2π = 4.85 GHz, γ/2π = 0.53 MHz, Δx = 3λ/4.
    pub fn noon_device() -> Self {
        Self::two_qubit(2.0 * PI * 4.85e9, 2.0 * PI * 0.53e6, 0.75)
    }

    /// Q1/Q2 at ω/2π = 6.45 GHz, γ/2π = 0.95 MHz, Δx = λ/2.
    pub fn partition_device() -> Self {
        Self::two_qubit(2.0 * PI * 6.45e9, 2.0 * PI * 0.95e6, 0.5)
    }

    pub fn n_qubits(&self) -> usize {
        self.positions.len()
    }

    /// λ = 2πv/ω.
    pub fn wavelength(&self) -> f64 {
        2.0 * PI * self.v / self.omega
    }

    /// Propagation phase ω x_j / v of qubit `j`.
    pub fn phase(&self, j: usize) -> f64 {
        self.omega * self.positions[j] / self.v
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.omega, self.v, self.gamma, self.gamma_phi, self.n_th]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite emitter parameter".into()));
        }
        if self.positions.is_empty() {
            return Err(Error::InvalidArgument("no qubits".into()));
        }
        if !(self.gamma > 0.0) || !(self.v > 0.0) || !(self.omega > 0.0) {
            return Err(Error::InvalidArgument("gamma, v and omega must be positive".into()));
        }
        if self.gamma_phi < 0.0 || self.n_th < 0.0 {
            return Err(Error::InvalidArgument("negative dephasing or thermal occupation".into()));
        }
        if self.positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("positions must be strictly increasing".into()));
        }
        if let Some(omegas) = &self.qubit_omegas {
            if omegas.len() != self.positions.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.positions.len(),
                    got: omegas.len(),
                });
            }
        }
        Ok(())
    }

    pub fn is_resonant(&self, j: usize) -> bool {
        match &self.qubit_omegas {
            None => true,
            Some(omegas) => (omegas[j] - self.omega).abs() <= RESONANCE_TOL * self.omega,
        }
    }
}

/// Initial state of one qubit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QubitState {
    Ground,
    Excited,
    /// `α|g> + β|e>`, amplitudes stored as (re, im) pairs.
    Superposition { alpha: (f64, f64), beta: (f64, f64) },
}

impl QubitState {
    pub fn superposition(alpha: C64, beta: C64) -> Result<Self> {
        let s = Self::Superposition {
            alpha: (alpha.re, alpha.im),
            beta: (beta.re, beta.im),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn amplitudes(&self) -> (C64, C64) {
        match *self {
            Self::Ground => (r(1.0), r(0.0)),
            Self::Excited => (r(0.0), r(1.0)),
            Self::Superposition { alpha, beta } => (c(alpha.0, alpha.1), c(beta.0, beta.1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.amplitudes();
        let norm = a.norm_sqr() + b.norm_sqr();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::UnsupportedPreparation(format!(
                "qubit amplitudes not normalized (|α|²+|β|² = {norm})"
            )));
        }
        Ok(())
    }
}

/// Per-qubit preparation of the whole register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitPreparation(pub Vec<QubitState>);

impl QubitPreparation {
    pub fn all_excited(n: usize) -> Self {
        Self(vec![QubitState::Excited; n])
    }

    /// The calibration state `(|g> + |e>)/√2` on a single qubit.
    pub fn equal_superposition() -> Self {
        Self(vec![QubitState::Superposition {
            alpha: (FRAC_1_SQRT_2, 0.0),
            beta: (FRAC_1_SQRT_2, 0.0),
        }])
    }
}

/// Everything needed to regenerate an emitted state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionSetup {
    pub config: EmitterConfig,
    pub prep: QubitPreparation,
    pub active: Vec<usize>,
    pub cutoff: usize,
}

impl EmissionSetup {
    pub fn emitted_state(&self) -> Result<TwoModeState> {
        emitted_state(&self.config, &self.prep, &self.active, self.cutoff)
    }
}

/// `(a_L† e^{iφ} + a_R† e^{-iφ}) / √2` for an emitter with propagation phase φ.
fn photon_creator(space: &FockSpace, phase: f64) -> Result<Operator> {
    let ad_l = creation(space, 0)?;
    let ad_r = creation(space, 1)?;
    Ok((ad_l * C64::from_polar(1.0, phase) + ad_r * C64::from_polar(1.0, -phase)) * r(FRAC_1_SQRT_2))
}

/// Normalized photonic state emitted by the active qubits.
pub fn emitted_state(
    config: &EmitterConfig,
    prep: &QubitPreparation,
    active: &[usize],
    cutoff: usize,
) -> Result<TwoModeState> {
    config.validate()?;
    if prep.0.len() != config.n_qubits() {
        return Err(Error::DimensionMismatch {
            expected: config.n_qubits(),
            got: prep.0.len(),
        });
    }
    for &j in active {
        if j >= config.n_qubits() {
            return Err(Error::ModeOutOfRange {
                mode: j,
                n_modes: config.n_qubits(),
            });
        }
        if !config.is_resonant(j) {
            return Err(Error::NonResonant(j));
        }
        prep.0[j].validate()?;
    }
    let space = FockSpace::two_mode(cutoff)?;

    let mut excited = Vec::new();
    let mut partial = Vec::new();
    for &j in active {
        match prep.0[j] {
            QubitState::Ground => {}
            QubitState::Excited => excited.push(j),
            QubitState::Superposition { .. } => partial.push(j),
        }
    }
    if !partial.is_empty() && (partial.len() > 1 || !excited.is_empty()) {
        return Err(Error::UnsupportedPreparation(
            "partially excited qubits are only supported as a lone emitter".into(),
        ));
    }
    let n_photons = excited.len() + partial.len();
    if n_photons > cutoff {
        return Err(Error::TooManyExcitations {
            excited: n_photons,
            cutoff,
        });
    }

    let vacuum = space.vacuum();
    let psi: StateVector = if let Some(&j) = partial.first() {
        let (alpha, beta) = prep.0[j].amplitudes();
        let one = photon_creator(&space, config.phase(j))? * &vacuum;
        &vacuum * alpha + one * beta
    } else {
        let mut psi = vacuum;
        for &j in &excited {
            psi = photon_creator(&space, config.phase(j))? * psi;
        }
        psi
    };
    TwoModeState::pure(space, &psi)
}

/// Normalized coefficients `(a, b, c)` of `|20>`, `|02>`, `|11>` for two
/// excited emitters at positions `{0, d·λ}`.
pub fn noon_coefficients(dx_over_lambda: f64) -> (C64, C64, C64) {
    let theta = 2.0 * PI * dx_over_lambda;
    let cos = theta.cos();
    let norm = (1.0 + cos * cos).sqrt();
    let a = C64::from_polar(FRAC_1_SQRT_2 / norm, theta);
    let b = C64::from_polar(FRAC_1_SQRT_2 / norm, -theta);
    let c11 = r(cos / norm);
    (a, b, c11)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Imperfection {
    /// `ρ → p00 |00><00| + (1 - p00) ρ`.
    VacuumAdmixture { p00: f64 },
    /// Each excited active qubit independently decays before emission with
    /// probability `p`; its photon leaves the integration window.
    PerQubitDecay { p: f64 },
}

pub fn vacuum_admixture(state: &TwoModeState, p00: f64) -> Result<TwoModeState> {
    if !(0.0..=1.0).contains(&p00) {
        return Err(Error::ProbabilityOutOfRange(p00));
    }
    let space = *state.space();
    let vac = DensityMatrix::from_pure(&space.vacuum())?;
    TwoModeState::new(space, vac.mix(state.rho(), p00)?)
}

/// Mixed state produced by the setup under an imperfection channel.
pub fn apply_imperfection(setup: &EmissionSetup, model: &Imperfection) -> Result<TwoModeState> {
    match *model {
        Imperfection::VacuumAdmixture { p00 } => {
            if !(0.0..=1.0).contains(&p00) {
                return Err(Error::ProbabilityOutOfRange(p00));
            }
            vacuum_admixture(&setup.emitted_state()?, p00)
        }
        Imperfection::PerQubitDecay { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::ProbabilityOutOfRange(p));
            }
            let excited: Vec<usize> = setup
                .active
                .iter()
                .copied()
                .filter(|&j| setup.prep.0.get(j) == Some(&QubitState::Excited))
                .collect();
            if excited.len() != setup.active.len() {
                return Err(Error::UnsupportedPreparation(
                    "per-qubit decay needs fully excited active qubits".into(),
                ));
            }
            let space = FockSpace::two_mode(setup.cutoff)?;
            let mut acc = Operator::zeros(space.dim(), space.dim());
            let n = excited.len();
            for mask in 0..(1usize << n) {
                let survivors: Vec<usize> = (0..n)
                    .filter(|k| mask & (1 << k) != 0)
                    .map(|k| excited[k])
                    .collect();
                let decayed = n - survivors.len();
                let weight = p.powi(decayed as i32) * (1.0 - p).powi(survivors.len() as i32);
                if weight == 0.0 {
                    continue;
                }
                let branch = emitted_state(&setup.config, &setup.prep, &survivors, setup.cutoff)?;
                acc += branch.rho().matrix() * r(weight);
            }
            TwoModeState::new(space, DensityMatrix::clamped(acc)?)
        }
    }
}
