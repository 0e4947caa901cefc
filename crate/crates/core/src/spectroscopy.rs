//! Elastic scattering of a coherent probe off one qubit in the waveguide:
//! the power- and detuning-dependent transmission S21, synthetic data,
//! a joint 2D fit, and thermal-occupation/temperature conversion.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_generator, Drive};
use crate::emission::EmitterConfig;
use crate::error::{Error, Result};
use crate::fock::{c, sigma_minus, C64};

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const K_B: f64 = 1.380_649e-23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectroscopyParams {
    /// Radiative decay rate γ into the waveguide (rad/s).
    pub gamma: f64,
    /// Pure dephasing rate γ_φ (rad/s).
    pub gamma_phi: f64,
    /// Thermal occupation of the line.
    pub n_th: f64,
    /// Qubit frequency (rad/s).
    pub omega: f64,
}

impl SpectroscopyParams {
    /// Parameters of the 4.85 GHz qubit.
    pub fn device() -> Self {
        use std::f64::consts::PI;
        Self {
            gamma: 2.0 * PI * 0.53e6,
            gamma_phi: 2.0 * PI * 51e3,
            n_th: 0.006,
            omega: 2.0 * PI * 4.85e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::DecayNotPositive(self.gamma));
        }
        if !(self.n_th >= 0.0) || !(self.omega > 0.0) || !self.gamma_phi.is_finite() {
            return Err(Error::InvalidArgument(format!("unphysical parameters {self:?}")));
        }
        if !(self.gamma2() > 0.0) {
            return Err(Error::InvalidArgument("total decoherence rate must be > 0".into()));
        }
        Ok(())
    }

    /// Total decoherence rate γ₂ = (1 + 2n_th) γ/2 + γ_φ.
    pub fn gamma2(&self) -> f64 {
        (1.0 + 2.0 * self.n_th) * self.gamma / 2.0 + self.gamma_phi
    }

    /// Probe Rabi frequency Ω_p = √(2γP/ħω).
    pub fn rabi(&self, power_watts: f64) -> f64 {
        (2.0 * self.gamma * power_watts / (HBAR * self.omega)).sqrt()
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * 10f64.powf(dbm / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * (watts / 1e-3).log10()
}

/// Transmission amplitude of a weak-to-saturating coherent probe.
pub fn s21_model(p: &SpectroscopyParams, delta_omega: f64, power_watts: f64) -> C64 {
    let g2 = p.gamma2();
    let th = 1.0 + 2.0 * p.n_th;
    let x = delta_omega / g2;
    let omega_p2 = 2.0 * p.gamma * power_watts / (HBAR * p.omega);
    let denom = 2.0 * g2 * th * (1.0 + x * x + omega_p2 / (th * p.gamma * g2));
    C64::new(1.0, 0.0) - C64::new(1.0, -x) * (p.gamma / denom)
}

/// [`s21_model`] with the probe power in dBm.
pub fn s21_model_dbm(p: &SpectroscopyParams, delta_omega: f64, power_dbm: f64) -> C64 {
    s21_model(p, delta_omega, dbm_to_watts(power_dbm))
}

/// Transmission from the steady state of the driven single-qubit master
/// equation: `S21 = 1 + √(γ/2) ⟨σ₋⟩ / α_in` with `α_in = iΩ_p/√(2γ)`.
pub fn s21_master_equation(p: &SpectroscopyParams, delta_omega: f64, power_watts: f64) -> Result<C64> {
    p.validate()?;
    if !(power_watts > 0.0) {
        return Err(Error::InvalidArgument("steady-state transmission needs a probe".into()));
    }
    let mut cfg = EmitterConfig::single_qubit(p.omega, p.gamma);
    cfg.gamma_phi = p.gamma_phi;
    cfg.n_th = p.n_th;
    let rabi = p.rabi(power_watts);
    let gen = build_generator(
        &cfg,
        Some(Drive {
            rabi,
            detuning: delta_omega,
        }),
    )?;
    let ss = gen.steady_state()?;
    let sm = ss.expect(&sigma_minus())?;
    let alpha_in = C64::new(0.0, rabi / (2.0 * p.gamma).sqrt());
    Ok(c(1.0, 0.0) + sm * (p.gamma / 2.0).sqrt() / alpha_in)
}

/// Transmission measured on a (detuning × power) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S21Dataset {
    /// Qubit frequency used for the ħω power conversion (rad/s).
    pub omega: f64,
    /// δω grid (rad/s), increasing.
    pub detunings: Vec<f64>,
    /// Probe powers (W), increasing.
    pub powers: Vec<f64>,
    /// `values[i][j]` at `detunings[i]`, `powers[j]`.
    pub values: Vec<Vec<C64>>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl S21Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.detunings.is_empty() || self.powers.is_empty() {
            return Err(Error::InvalidArgument("empty S21 grid".into()));
        }
        if !strictly_increasing(&self.detunings) || !strictly_increasing(&self.powers) {
            return Err(Error::InvalidArgument("S21 grids must be increasing".into()));
        }
        if self.powers[0] < 0.0 {
            return Err(Error::InvalidArgument("probe power must be ≥ 0".into()));
        }
        if self.values.len() != self.detunings.len()
            || self.values.iter().any(|row| row.len() != self.powers.len())
        {
            return Err(Error::DimensionMismatch {
                expected: self.detunings.len() * self.powers.len(),
                got: self.values.iter().map(Vec::len).sum(),
            });
        }
        if self.values.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite S21 value".into()));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.detunings.len() * self.powers.len()
    }

    /// CSV with columns `delta_omega_hz,power_dbm,re_s21,im_s21`; the
    /// detuning column is δω/2π.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_omega_hz,power_dbm,re_s21,im_s21\n");
        for (i, d) in self.detunings.iter().enumerate() {
            for (j, pw) in self.powers.iter().enumerate() {
                let z = self.values[i][j];
                let _ = writeln!(
                    out,
                    "{:.12e},{:.12e},{:.12e},{:.12e}",
                    d / (2.0 * std::f64::consts::PI),
                    watts_to_dbm(*pw),
                    z.re,
                    z.im
                );
            }
        }
        out
    }
}

/// Uniform detuning grid over ±`half_span_hz` and power grid over
/// [`dbm_lo`, `dbm_hi`].
pub fn standard_grids(half_span_hz: f64, n_detuning: usize, dbm_lo: f64, dbm_hi: f64, n_power: usize) -> (Vec<f64>, Vec<f64>) {
    let lin = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    };
    let two_pi = 2.0 * std::f64::consts::PI;
    let det = lin(-half_span_hz, half_span_hz, n_detuning)
        .into_iter()
        .map(|f| two_pi * f)
        .collect();
    let pow = lin(dbm_lo, dbm_hi, n_power).into_iter().map(dbm_to_watts).collect();
    (det, pow)
}

/// Model values plus independent circular complex Gaussian noise with
/// `E|ε|² = noise_sigma²` (standard deviation `noise_sigma/√2` on each of
/// the real and imaginary parts).
pub fn synth_dataset(
    p: &SpectroscopyParams,
    detunings: &[f64],
    powers: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<S21Dataset> {
    p.validate()?;
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise sigma must be ≥ 0".into()));
    }
    let normal = Normal::new(0.0, noise_sigma / std::f64::consts::SQRT_2).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let values = detunings
        .iter()
        .map(|&d| {
            powers
                .iter()
                .map(|&pw| {
                    let z = s21_model(p, d, pw);
                    if noise_sigma > 0.0 {
                        z + C64::new(normal.sample(&mut rng), normal.sample(&mut rng))
                    } else {
                        z
                    }
                })
                .collect()
        })
        .collect();
    let data = S21Dataset {
        omega: p.omega,
        detunings: detunings.to_vec(),
        powers: powers.to_vec(),
        values,
    };
    data.validate()?;
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Stop when the relative parameter step falls below this.
    pub step_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S21Fit {
    pub params: SpectroscopyParams,
    /// Covariance of (γ, γ_φ, n_th) in natural units.
    pub covariance: [[f64; 3]; 3],
    /// Euclidean norm of the stacked (Re, Im) residuals.
    pub residual_norm: f64,
    pub iterations: usize,
}

impl S21Fit {
    pub fn std_errors(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.covariance[k][k].max(0.0).sqrt())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Condition number of the normal matrix above which the fit is refused.
const MAX_CONDITION: f64 = 1e12;

fn params_from_log(theta: &Vector3<f64>, omega: f64) -> SpectroscopyParams {
    SpectroscopyParams {
        gamma: theta[0].exp(),
        gamma_phi: theta[1].exp(),
        n_th: theta[2].exp(),
        omega,
    }
}

fn residuals(data: &S21Dataset, p: &SpectroscopyParams) -> DVector<f64> {
    let mut r = DVector::zeros(2 * data.n_points());
    let mut k = 0;
    for (i, &d) in data.detunings.iter().enumerate() {
        for (j, &pw) in data.powers.iter().enumerate() {
            let z = s21_model(p, d, pw) - data.values[i][j];
            r[k] = z.re;
            r[k + 1] = z.im;
            k += 2;
        }
    }
    r
}

/// Partial derivatives of S21 with respect to (γ, γ_φ, n_th).
fn s21_gradient(p: &SpectroscopyParams, delta_omega: f64, power_watts: f64) -> [C64; 3] {
    let g2 = p.gamma2();
    let th = 1.0 + 2.0 * p.n_th;
    let q = 2.0 * power_watts / (HBAR * p.omega);
    let d2 = delta_omega * delta_omega;
    let u = C64::new(1.0, -delta_omega / g2);
    let big_d = 2.0 * g2 * th + 2.0 * th * d2 / g2 + 2.0 * q;
    let du_dg2 = C64::new(0.0, delta_omega / (g2 * g2));
    let dd_dg2 = 2.0 * th - 2.0 * th * d2 / (g2 * g2);
    let dd_dth = 2.0 * g2 + 2.0 * d2 / g2;
    // dS = -(dγ u / D + γ du / D - γ u dD / D²)
    let through_g2 = |dg2: f64| du_dg2 * (p.gamma * dg2 / big_d) - u * (p.gamma * dd_dg2 * dg2 / (big_d * big_d));
    let d_gamma = -(u / big_d + through_g2(th / 2.0));
    let d_gamma_phi = -through_g2(1.0);
    let d_n = -(through_g2(p.gamma) - u * (p.gamma * dd_dth * 2.0 / (big_d * big_d)));
    [d_gamma, d_gamma_phi, d_n]
}

/// Jacobian of the stacked residuals in natural parameter units.
fn jacobian(data: &S21Dataset, p: &SpectroscopyParams) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(2 * data.n_points(), 3);
    let mut k = 0;
    for &d in &data.detunings {
        for &pw in &data.powers {
            let g = s21_gradient(p, d, pw);
            for col in 0..3 {
                jac[(k, col)] = g[col].re;
                jac[(k + 1, col)] = g[col].im;
            }
            k += 2;
        }
    }
    jac
}

/// Jacobian with respect to the logarithms of the parameters.
fn log_jacobian(data: &S21Dataset, theta: &Vector3<f64>) -> DMatrix<f64> {
    let p = params_from_log(theta, data.omega);
    let mut jac = jacobian(data, &p);
    for (col, scale) in [p.gamma, p.gamma_phi, p.n_th].into_iter().enumerate() {
        jac.column_mut(col).scale_mut(scale);
    }
    jac
}

/// Joint fit of γ, γ_φ and n_th to the complex transmission over the whole
/// grid by damped Gauss–Newton (Levenberg–Marquardt) on the logarithms of
/// the parameters, which keeps them positive.
pub fn fit_s21(data: &S21Dataset, initial: &SpectroscopyParams, opts: &FitOptions) -> Result<S21Fit> {
    data.validate()?;
    let mut guess = *initial;
    guess.omega = data.omega;
    guess.validate()?;
    if !(guess.gamma_phi > 0.0) || !(guess.n_th > 0.0) {
        return Err(Error::InvalidArgument("initial γ_φ and n_th must be > 0".into()));
    }
    if data.n_points() < 4 {
        return Err(Error::IllConditioned("fewer data than parameters".into()));
    }
    // without saturation γ and n_th are degenerate
    let max_power = *data.powers.last().expect("validated non-empty");
    if guess.rabi(max_power) < guess.gamma {
        return Err(Error::IllConditioned(format!(
            "probe never saturates the qubit: Ω_p = {:.3e} < γ = {:.3e}",
            guess.rabi(max_power),
            guess.gamma
        )));
    }

    let mut theta = Vector3::new(guess.gamma.ln(), guess.gamma_phi.ln(), guess.n_th.ln());
    let mut r = residuals(data, &guess);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let jac = log_jacobian(data, &theta);
        let jtj: Matrix3<f64> = (jac.transpose() * &jac).fixed_view::<3, 3>(0, 0).into_owned();
        let jtr: Vector3<f64> = (jac.transpose() * &r).fixed_rows::<3>(0).into_owned();
        let mut accepted = false;
        for _ in 0..60 {
            let mut a = jtj;
            for k in 0..3 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(mut step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            // trust region in log space: at most a factor e per iteration
            let longest = step.amax();
            if longest > 1.0 {
                step /= longest;
            }
            let trial = theta + step;
            let rt = residuals(data, &params_from_log(&trial, data.omega));
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let small = step.amax() < opts.step_tol;
                let stalled = cost - ct <= 1e-15 * cost;
                theta = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if small || (stalled && step.amax() < 1e-6) || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if converged || !accepted {
            // a rejected step at any damping means a (numerical) minimum
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "S21 fit did not converge in {} iterations",
            opts.max_iters
        )));
    }

    let params = params_from_log(&theta, data.omega);
    let jac = jacobian(data, &params);
    let jtj: Matrix3<f64> = (jac.transpose() * &jac).fixed_view::<3, 3>(0, 0).into_owned();
    // conditioning of the column-normalized problem is independent of units
    let norms = Vector3::from_fn(|k, _| jtj[(k, k)].sqrt());
    let corr = Matrix3::from_fn(|i, j| jtj[(i, j)] / (norms[i] * norms[j]));
    let eig = corr.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::IllConditioned(format!(
            "Jacobian condition {:.3e}: power range too narrow to separate parameters",
            (hi / lo).sqrt()
        )));
    }
    let dof = (r.len() - 3).max(1) as f64;
    let s2 = cost / dof;
    let cov = jtj.try_inverse().ok_or_else(|| Error::IllConditioned("singular normal matrix".into()))? * s2;
    let covariance = [0, 1, 2].map(|i| [0, 1, 2].map(|j| cov[(i, j)]));
    Ok(S21Fit {
        params,
        covariance,
        residual_norm: cost.sqrt(),
        iterations,
    })
}

/// Effective temperature of a bath with occupation `n_th` at `omega`:
/// `T = ħω / (k_B ln(1 + 1/n_th))`.
pub fn thermal_occupation_to_temperature(n_th: f64, omega: f64) -> Result<f64> {
    if !(n_th > 0.0) || !n_th.is_finite() {
        return Err(Error::ZeroOccupation);
    }
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument("frequency must be > 0".into()));
    }
    Ok(HBAR * omega / (K_B * (1.0 / n_th).ln_1p()))
}

/// Bose occupation `1 / (e^{ħω/k_BT} - 1)`.
pub fn temperature_to_thermal_occupation(kelvin: f64, omega: f64) -> Result<f64> {
    if !(kelvin > 0.0) || !(omega > 0.0) {
        return Err(Error::InvalidArgument("temperature and frequency must be > 0".into()));
    }
    Ok(1.0 / (HBAR * omega / (K_B * kelvin)).exp_m1())
}
