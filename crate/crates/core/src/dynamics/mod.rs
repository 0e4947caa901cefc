//! Master-equation dynamics of qubits coupled to a bidirectional waveguide.
//!
//! Markovian, zero-delay regime in the frame rotating at the shared qubit
//! frequency. Coherent exchange `J_ij = (γ/2) sin(ω|x_i - x_j|/v)` and
//! correlated decay `Γ_ij = γ cos(ω(x_i - x_j)/v)`; the decay matrix is
//! diagonalized into independent jump channels before integration.

mod integrate;
mod observables;

pub use integrate::{evolve, propagate, step_propagator, Tolerances, Trajectory};
pub use observables::{
    cross_coincidence_g2, integrated_photon_number, output_flux, output_operator,
    total_emission_rate, trajectory_csv, two_time_g1, Direction, MIN_HORIZON_GAMMA_TIMES,
};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::emission::EmitterConfig;
use crate::error::{Error, Result};
use crate::fock::{c, qubit_operator, r, sigma_minus, sigma_plus, sigma_x, sigma_z, DensityMatrix, Operator};

/// Coherent probe on a single qubit: `H = ½ δω σ_z + ½ Ω_p σ_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    /// Ω_p (rad/s).
    pub rabi: f64,
    /// δω = ω - ω_p (rad/s).
    pub detuning: f64,
}

/// Whether waveguide-mediated exchange enters the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeTreatment {
    #[default]
    Full,
    /// Drop `J_ij`. This is the approximation under which fully excited
    /// emitters produce the closed-form states of [`crate::emission`].
    Neglected,
}

#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    hamiltonian: Operator,
    dissipators: Vec<(Operator, f64)>,
    n_qubits: usize,
    decay_matrix: DMatrix<f64>,
    exchange_matrix: DMatrix<f64>,
    /// `H - (i/2) Σ rate L†L`, cached for the right-hand side.
    effective: Operator,
}

impl LindbladGenerator {
    /// Generator from explicit parts; rates must be non-negative.
    pub fn from_parts(hamiltonian: Operator, dissipators: Vec<(Operator, f64)>) -> Result<Self> {
        let dim = hamiltonian.nrows();
        if !hamiltonian.is_square() {
            return Err(Error::InvalidArgument("hamiltonian not square".into()));
        }
        if (&hamiltonian - hamiltonian.adjoint()).camax() > 1e-12 * hamiltonian.camax().max(1.0) {
            return Err(Error::InvalidArgument("hamiltonian not Hermitian".into()));
        }
        let mut effective = hamiltonian.clone();
        for (op, rate) in &dissipators {
            if op.nrows() != dim || op.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: op.nrows(),
                });
            }
            if !(*rate >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative rate {rate}")));
            }
            effective -= op.adjoint() * op * c(0.0, 0.5 * rate);
        }
        let n_qubits = (dim as f64).log2().round() as usize;
        Ok(Self {
            hamiltonian,
            dissipators,
            n_qubits,
            decay_matrix: DMatrix::zeros(n_qubits, n_qubits),
            exchange_matrix: DMatrix::zeros(n_qubits, n_qubits),
            effective,
        })
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn dissipators(&self) -> &[(Operator, f64)] {
        &self.dissipators
    }

    /// Correlated decay matrix Γ (before thermal scaling).
    pub fn decay_matrix(&self) -> &DMatrix<f64> {
        &self.decay_matrix
    }

    /// Exchange couplings J entering the Hamiltonian (zero when neglected).
    pub fn exchange_matrix(&self) -> &DMatrix<f64> {
        &self.exchange_matrix
    }

    /// `dX/dt` for any operator X (density matrix or regression operand).
    pub fn apply(&self, x: &Operator) -> Operator {
        let heff = &self.effective;
        let mut out = (heff * x - x * heff.adjoint()) * c(0.0, -1.0);
        for (op, rate) in &self.dissipators {
            out += op * x * op.adjoint() * r(*rate);
        }
        out
    }

    /// Dense superoperator acting on column-stacked operators.
    pub fn superoperator(&self) -> Operator {
        let d = self.dim();
        let mut sup = Operator::zeros(d * d, d * d);
        for j in 0..d {
            for i in 0..d {
                let mut basis = Operator::zeros(d, d);
                basis[(i, j)] = r(1.0);
                let image = self.apply(&basis);
                let col = j * d + i;
                for jj in 0..d {
                    for ii in 0..d {
                        sup[(jj * d + ii, col)] = image[(ii, jj)];
                    }
                }
            }
        }
        sup
    }

    /// Unique steady state, from the null space of the superoperator with the
    /// trace condition replacing one row.
    pub fn steady_state(&self) -> Result<DensityMatrix> {
        let d = self.dim();
        let mut sup = self.superoperator();
        let mut rhs = nalgebra::DVector::from_element(d * d, r(0.0));
        for col in 0..d * d {
            sup[(0, col)] = r(0.0);
        }
        for k in 0..d {
            sup[(0, k * d + k)] = r(1.0);
        }
        rhs[0] = r(1.0);
        let sol = sup
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::IllConditioned("steady state not unique".into()))?;
        let rho = Operator::from_fn(d, d, |i, j| sol[j * d + i]);
        DensityMatrix::clamped(rho)
    }
}

/// Generator with exchange included.
pub fn build_generator(config: &EmitterConfig, drive: Option<Drive>) -> Result<LindbladGenerator> {
    build_generator_with(config, drive, ExchangeTreatment::Full)
}

pub fn build_generator_with(
    config: &EmitterConfig,
    drive: Option<Drive>,
    exchange: ExchangeTreatment,
) -> Result<LindbladGenerator> {
    config.validate()?;
    let n = config.n_qubits();
    let gamma = config.gamma;
    let k = config.omega / config.v;

    let decay = DMatrix::from_fn(n, n, |i, j| {
        gamma * (k * (config.positions[i] - config.positions[j])).cos()
    });
    let exch = match exchange {
        ExchangeTreatment::Full => DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                0.5 * gamma * (k * (config.positions[i] - config.positions[j]).abs()).sin()
            }
        }),
        ExchangeTreatment::Neglected => DMatrix::zeros(n, n),
    };

    let lowering: Vec<Operator> = (0..n)
        .map(|j| qubit_operator(&sigma_minus(), j, n))
        .collect::<Result<_>>()?;
    let dim = 1usize << n;

    let mut h = Operator::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            if i != j && exch[(i, j)] != 0.0 {
                h += lowering[i].adjoint() * &lowering[j] * r(exch[(i, j)]);
            }
        }
    }
    if let Some(d) = drive {
        if n != 1 {
            return Err(Error::InvalidArgument(
                "coherent drive is only modelled for a single qubit".into(),
            ));
        }
        h += sigma_z() * r(0.5 * d.detuning) + sigma_x() * r(0.5 * d.rabi);
    }

    let eig = SymmetricEigen::new(decay.clone());
    let mut dissipators = Vec::new();
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-10 * gamma {
            return Err(Error::DecayNotPositive(lam));
        }
        if lam <= 1e-14 * gamma {
            continue;
        }
        let mut jump = Operator::zeros(dim, dim);
        for i in 0..n {
            jump += &lowering[i] * r(eig.eigenvectors[(i, idx)]);
        }
        dissipators.push((jump.clone(), (1.0 + config.n_th) * lam));
        if config.n_th > 0.0 {
            dissipators.push((jump.adjoint(), config.n_th * lam));
        }
    }
    if config.gamma_phi > 0.0 {
        for j in 0..n {
            dissipators.push((qubit_operator(&sigma_z(), j, n)?, 0.5 * config.gamma_phi));
        }
    }

    let mut gen = LindbladGenerator::from_parts(h, dissipators)?;
    gen.n_qubits = n;
    gen.decay_matrix = decay;
    gen.exchange_matrix = exch;
    Ok(gen)
}

/// Register state with the given qubits excited and the rest in `|g>`.
pub fn excited_register(n_qubits: usize, excited: &[usize]) -> Result<DensityMatrix> {
    let mut index = 0usize;
    for &j in excited {
        if j >= n_qubits {
            return Err(Error::ModeOutOfRange {
                mode: j,
                n_modes: n_qubits,
            });
        }
        index |= 1 << (n_qubits - 1 - j);
    }
    let dim = 1usize << n_qubits;
    let mut m = Operator::zeros(dim, dim);
    m[(index, index)] = r(1.0);
    DensityMatrix::new(m)
}

/// Excited-state population operator `σ_+ σ_-` of qubit `j`.
pub fn excitation_operator(j: usize, n_qubits: usize) -> Result<Operator> {
    qubit_operator(&(sigma_plus() * sigma_minus()), j, n_qubits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    const GAMMA: f64 = 2.0 * PI * 0.53e6;

    fn pair(d: f64) -> EmitterConfig {
        EmitterConfig::two_qubit(2.0 * PI * 4.85e9, GAMMA, d)
    }

    #[test]
    fn single_qubit_channels() {
        let mut cfg = EmitterConfig::single_qubit(2.0 * PI * 4.85e9, GAMMA);
        cfg.n_th = 0.006;
        cfg.gamma_phi = 2.0 * PI * 51e3;
        let gen = build_generator(&cfg, None).unwrap();
        let d = gen.dissipators();
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].0, sigma_minus());
        assert_abs_diff_eq!(d[0].1, (1.0 + 0.006) * GAMMA, epsilon = 1e-6);
        assert_eq!(d[1].0, sigma_plus());
        assert_abs_diff_eq!(d[1].1, 0.006 * GAMMA, epsilon = 1e-6);
        assert_eq!(d[2].0, sigma_z());
        assert_abs_diff_eq!(d[2].1, 0.5 * cfg.gamma_phi, epsilon = 1e-9);
    }

    #[test]
    fn half_wave_coefficients() {
        let gen = build_generator(&pair(0.5), None).unwrap();
        assert_abs_diff_eq!(gen.decay_matrix()[(0, 1)], -GAMMA, epsilon = 1e-9 * GAMMA);
        assert_abs_diff_eq!(gen.exchange_matrix()[(0, 1)], 0.0, epsilon = 1e-9 * GAMMA);
        let eig = SymmetricEigen::new(gen.decay_matrix().clone());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(vals[0], 0.0, epsilon = 1e-12 * GAMMA);
        assert_abs_diff_eq!(vals[1], 2.0 * GAMMA, epsilon = 1e-12 * GAMMA);
    }

    #[test]
    fn three_quarter_wave_coefficients() {
        let gen = build_generator(&pair(0.75), None).unwrap();
        assert_abs_diff_eq!(gen.decay_matrix()[(0, 1)], 0.0, epsilon = 1e-9 * GAMMA);
        assert_abs_diff_eq!(gen.exchange_matrix()[(0, 1)], -GAMMA / 2.0, epsilon = 1e-9 * GAMMA);
        // diagonal decay matrix
        let gm = gen.decay_matrix();
        assert!(gm[(0, 1)].abs() < 1e-9 * GAMMA && gm[(1, 0)].abs() < 1e-9 * GAMMA);
        let neglected = build_generator_with(&pair(0.75), None, ExchangeTreatment::Neglected).unwrap();
        assert_eq!(neglected.exchange_matrix()[(0, 1)], 0.0);
    }

    #[test]
    fn drive_needs_single_qubit() {
        let drive = Drive {
            rabi: 1e6,
            detuning: 0.0,
        };
        assert!(build_generator(&pair(0.5), Some(drive)).is_err());
    }

    #[test]
    fn generator_is_trace_preserving() {
        let mut cfg = pair(0.31);
        cfg.gamma_phi = 0.1 * GAMMA;
        cfg.n_th = 0.02;
        let gen = build_generator(&cfg, None).unwrap();
        let sup = gen.superoperator();
        let d = gen.dim();
        // trace functional annihilates every column of the superoperator
        for col in 0..d * d {
            let mut tr = c(0.0, 0.0);
            for k in 0..d {
                tr += sup[(k * d + k, col)];
            }
            assert!(tr.norm() < 1e-6, "column {col}: {tr}");
        }
    }

    #[test]
    fn steady_state_of_undriven_qubit_is_thermal() {
        let mut cfg = EmitterConfig::single_qubit(2.0 * PI * 4.85e9, GAMMA);
        cfg.n_th = 0.1;
        let gen = build_generator(&cfg, None).unwrap();
        let ss = gen.steady_state().unwrap();
        // detailed balance: p_e / p_g = n / (1 + n)
        assert_abs_diff_eq!(ss.population(1) / ss.population(0), 0.1 / 1.1, epsilon = 1e-10);
    }
}
