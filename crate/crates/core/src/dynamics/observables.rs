//! Input–output observables: output fluxes, photon numbers and correlation
//! functions of the fields radiated into the two waveguide directions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::emission::EmitterConfig;
use crate::error::{Error, Result};
use crate::fock::{c, qubit_operator, r, sigma_minus, trace_product, DensityMatrix, Operator, C64};

use super::integrate::{evolve, propagate, step_propagator, Trajectory};
use super::{excitation_operator, LindbladGenerator};

/// Photon-number integrals need the emission to have decayed: at `8/γ` the
/// untracked tail is below 1e-3 photons per excitation.
pub const MIN_HORIZON_GAMMA_TIMES: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Left => "L",
            Direction::Right => "R",
        }
    }
}

/// Qubit-register image of the outgoing field operator (vacuum input):
/// `a_L = √(γ/2) Σ_j σ₋⁽ʲ⁾ e^{-iω(x_j - x_1)/v}`, with the opposite phase for
/// `a_R`.
pub fn output_operator(config: &EmitterConfig, direction: Direction) -> Result<Operator> {
    config.validate()?;
    let n = config.n_qubits();
    let sign = match direction {
        Direction::Left => -1.0,
        Direction::Right => 1.0,
    };
    let amp = (config.gamma / 2.0).sqrt();
    let mut out = Operator::zeros(1 << n, 1 << n);
    for j in 0..n {
        let phi = sign * (config.phase(j) - config.phase(0));
        out += qubit_operator(&sigma_minus(), j, n)? * C64::from_polar(amp, phi);
    }
    Ok(out)
}

fn check_register(traj: &Trajectory, op: &Operator) -> Result<()> {
    match traj.states.first() {
        Some(s) if s.dim() != op.nrows() => Err(Error::DimensionMismatch {
            expected: op.nrows(),
            got: s.dim(),
        }),
        _ => Ok(()),
    }
}

/// `⟨a†(t) a(t)⟩` at each time of the trajectory (photons per second).
pub fn output_flux(traj: &Trajectory, config: &EmitterConfig, direction: Direction) -> Result<Vec<f64>> {
    let a = output_operator(config, direction)?;
    let n_op = a.adjoint() * &a;
    check_register(traj, &n_op)?;
    Ok(traj
        .states
        .iter()
        .map(|s| trace_product(s.matrix(), &n_op).re)
        .collect())
}

/// Flux summed over both directions.
pub fn total_emission_rate(traj: &Trajectory, config: &EmitterConfig) -> Result<Vec<f64>> {
    let left = output_flux(traj, config, Direction::Left)?;
    let right = output_flux(traj, config, Direction::Right)?;
    Ok(left.iter().zip(&right).map(|(a, b)| a + b).collect())
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Photons emitted into one direction over the trajectory.
pub fn integrated_photon_number(
    traj: &Trajectory,
    config: &EmitterConfig,
    direction: Direction,
) -> Result<f64> {
    let required = traj.times.first().copied().unwrap_or(0.0) + MIN_HORIZON_GAMMA_TIMES / config.gamma;
    if traj.final_time() < required {
        return Err(Error::InsufficientTime {
            final_time: traj.final_time(),
            required,
        });
    }
    let flux = output_flux(traj, config, direction)?;
    Ok(trapezoid(&traj.times, &flux))
}

/// CSV with time, per-qubit excitation, and the two output fluxes.
pub fn trajectory_csv(traj: &Trajectory, config: &EmitterConfig) -> Result<String> {
    let n = config.n_qubits();
    let left = output_flux(traj, config, Direction::Left)?;
    let right = output_flux(traj, config, Direction::Right)?;
    let excitation: Vec<Operator> = (0..n)
        .map(|j| excitation_operator(j, n))
        .collect::<Result<_>>()?;
    let mut out = String::from("t");
    for j in 0..n {
        let _ = write!(out, ",p_e{}", j + 1);
    }
    out.push_str(",flux_L,flux_R\n");
    for (k, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
        let _ = write!(out, "{t:.9e}");
        for op in &excitation {
            let _ = write!(out, ",{:.9e}", trace_product(s.matrix(), op).re);
        }
        let _ = writeln!(out, ",{:.9e},{:.9e}", left[k], right[k]);
    }
    Ok(out)
}

fn check_horizon(requested: f64, horizon: f64) -> Result<()> {
    if requested > horizon * (1.0 + 1e-12) || requested < 0.0 {
        return Err(Error::HorizonExceeded { requested, horizon });
    }
    Ok(())
}

/// First-order two-time correlation `⟨a†(t+τ) a(t)⟩` by quantum regression:
/// evolve `a ρ(t)` forward by τ and trace against `a†`.
pub fn two_time_g1(
    gen: &LindbladGenerator,
    config: &EmitterConfig,
    rho0: &DensityMatrix,
    direction: Direction,
    t: f64,
    tau: f64,
    horizon: f64,
) -> Result<C64> {
    if tau < 0.0 {
        return Err(Error::InvalidArgument("τ must be non-negative".into()));
    }
    check_horizon(t + tau, horizon)?;
    let a = output_operator(config, direction)?;
    if a.nrows() != gen.dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.dim(),
            got: a.nrows(),
        });
    }
    let rho_t = if t > 0.0 {
        evolve(rho0, gen, &[0.0, t])?.states.pop().expect("two states")
    } else {
        rho0.clone()
    };
    let x = &a * rho_t.matrix();
    let x_tau = if tau > 0.0 { propagate(&x, gen, 0.0, tau)? } else { x };
    Ok(trace_product(&a.adjoint(), &x_tau))
}

fn vectorize(x: &Operator) -> nalgebra::DVector<C64> {
    // column stacking, matching the superoperator convention
    nalgebra::DVector::from_iterator(x.len(), x.iter().copied())
}

/// Total number of coincidences between the two output directions,
/// `∫∫ dt dt' ⟨a_L†(t) a_R†(t') a_R(t') a_L(t)⟩` over `[0, horizon]²`.
///
/// Both time orderings are evaluated by nested quantum regression on a
/// uniform grid of `n_grid` steps and integrated with the trapezoidal rule.
pub fn cross_coincidence_g2(
    gen: &LindbladGenerator,
    config: &EmitterConfig,
    rho0: &DensityMatrix,
    horizon: f64,
    n_grid: usize,
) -> Result<f64> {
    let required = MIN_HORIZON_GAMMA_TIMES / config.gamma;
    if horizon < required {
        return Err(Error::InsufficientTime {
            final_time: horizon,
            required,
        });
    }
    if n_grid < 2 {
        return Err(Error::InvalidArgument("coincidence grid needs at least 2 steps".into()));
    }
    let a_l = output_operator(config, Direction::Left)?;
    let a_r = output_operator(config, Direction::Right)?;
    let d = gen.dim();
    if a_l.nrows() != d || rho0.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: rho0.dim(),
        });
    }
    let h = horizon / n_grid as f64;
    let prop = step_propagator(gen, h)?;
    let prop_adj = prop.adjoint();

    // Heisenberg images of the number operators, (P†)^m vec(n)
    let heisenberg = |n_op: Operator| {
        let mut v = vectorize(&n_op);
        let mut out = Vec::with_capacity(n_grid + 1);
        for _ in 0..=n_grid {
            out.push(v.clone());
            v = &prop_adj * v;
        }
        out
    };
    let n_l = heisenberg(a_l.adjoint() * &a_l);
    let n_r = heisenberg(a_r.adjoint() * &a_r);

    let weight = |m: usize, last: usize| if m == 0 || m == last { 0.5 * h } else { h };
    let mut rho = vectorize(rho0.matrix());
    let mut outer = Vec::with_capacity(n_grid + 1);
    for k in 0..=n_grid {
        let rho_k = Operator::from_column_slice(d, d, rho.as_slice());
        let x_l = &a_l * &rho_k * a_l.adjoint();
        let x_r = &a_r * &rho_k * a_r.adjoint();
        let (v_l, v_r) = (vectorize(&x_l), vectorize(&x_r));
        let last = n_grid - k;
        let mut inner = c(0.0, 0.0);
        if last > 0 {
            for m in 0..=last {
                let w = r(weight(m, last));
                inner += (n_r[m].dotc(&v_l) + n_l[m].dotc(&v_r)) * w;
            }
        }
        outer.push(inner.re);
        rho = &prop * rho;
    }
    let times: Vec<f64> = (0..=n_grid).map(|k| k as f64 * h).collect();
    Ok(trapezoid(&times, &outer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_generator, build_generator_with, excited_register, ExchangeTreatment};
    use crate::fock::tensor;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    const GAMMA: f64 = 2.0 * PI * 0.53e6;
    const OMEGA: f64 = 2.0 * PI * 4.85e9;

    fn pair(d: f64) -> EmitterConfig {
        EmitterConfig::two_qubit(OMEGA, GAMMA, d)
    }

    fn grid(t_end: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|k| t_end * k as f64 / n as f64).collect()
    }

    /// Superoperator written directly in the non-diagonal Γ form,
    /// `Σ_ij Γ_ij (σ_j ρ σ_i† - ½{σ_i† σ_j, ρ}) - i[H, ρ]`, as an independent
    /// oracle for the channel decomposition used by the generator.
    fn oracle_superoperator(cfg: &EmitterConfig, with_exchange: bool) -> Operator {
        let n = cfg.n_qubits();
        let d = 1 << n;
        let k = cfg.omega / cfg.v;
        let eye = Operator::identity(d, d);
        let sig: Vec<Operator> = (0..n).map(|j| qubit_operator(&sigma_minus(), j, n).unwrap()).collect();
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let left = |a: &Operator| tensor(&eye, a);
        let right = |b: &Operator| tensor(&b.transpose(), &eye);
        let mut h = Operator::zeros(d, d);
        let mut sup = Operator::zeros(d * d, d * d);
        for i in 0..n {
            for j in 0..n {
                let dx = cfg.positions[i] - cfg.positions[j];
                let g = cfg.gamma * (k * dx).cos();
                if with_exchange && i != j {
                    h += sig[i].adjoint() * &sig[j] * r(0.5 * cfg.gamma * (k * dx.abs()).sin());
                }
                let si_dag = sig[i].adjoint();
                let prod = &si_dag * &sig[j];
                sup += (tensor(&si_dag.transpose(), &sig[j])
                    - (left(&prod) + right(&prod)) * r(0.5))
                    * r(g);
            }
        }
        sup += (left(&h) - right(&h)) * c(0.0, -1.0);
        sup
    }

    fn expm_evolve(sup: &Operator, rho0: &Operator, t: f64) -> Operator {
        let p = (sup * r(t)).exp();
        let d = rho0.nrows();
        let v = p * vectorize(rho0);
        Operator::from_column_slice(d, d, v.as_slice())
    }

    #[test]
    fn superradiant_populations_match_matrix_exponential() {
        let cfg = pair(0.5);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        let times = grid(4.0 / GAMMA, 20);
        let traj = evolve(&rho0, &gen, &times).unwrap();
        let sup = oracle_superoperator(&cfg, true);
        let pops: Vec<Operator> = (0..2).map(|j| excitation_operator(j, 2).unwrap()).collect();
        for (t, s) in times.iter().zip(&traj.states) {
            let expected = expm_evolve(&sup, rho0.matrix(), *t);
            for p in &pops {
                let got = trace_product(s.matrix(), p).re;
                let want = trace_product(&expected, p).re;
                assert_abs_diff_eq!(got, want, epsilon = 1e-8);
            }
        }
        assert!(traj.max_trace_drift < 1e-8);
    }

    #[test]
    fn generator_matches_oracle_superoperator() {
        for &d in &[0.13, 0.5, 0.75, 1.2] {
            let mut cfg = pair(d);
            cfg.gamma_phi = 0.0;
            let gen = build_generator(&cfg, None).unwrap();
            let diff = (gen.superoperator() - oracle_superoperator(&cfg, true)).camax();
            assert!(diff < 1e-9 * GAMMA, "d = {d}: {diff}");
        }
    }

    #[test]
    fn independent_decay_at_three_quarter_wavelength() {
        let cfg = pair(0.75);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        let times = grid(3.0 / GAMMA, 30);
        let traj = evolve(&rho0, &gen, &times).unwrap();
        let total = excitation_operator(0, 2).unwrap() + excitation_operator(1, 2).unwrap();
        for (t, s) in times.iter().zip(&traj.states) {
            let got = trace_product(s.matrix(), &total).re;
            assert_abs_diff_eq!(got, 2.0 * (-GAMMA * t).exp(), epsilon = 1e-6);
        }
    }

    #[test]
    fn single_qubit_flux_and_photon_number() {
        let cfg = EmitterConfig::single_qubit(OMEGA, GAMMA);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(1, &[0]).unwrap();
        let times = grid(12.0 / GAMMA, 1200);
        let traj = evolve(&rho0, &gen, &times).unwrap();
        let flux = output_flux(&traj, &cfg, Direction::Left).unwrap();
        for (t, f) in times.iter().zip(&flux).step_by(50) {
            assert_abs_diff_eq!(*f / GAMMA, 0.5 * (-GAMMA * t).exp(), epsilon = 1e-7);
        }
        for dir in [Direction::Left, Direction::Right] {
            let n = integrated_photon_number(&traj, &cfg, dir).unwrap();
            assert_abs_diff_eq!(n, 0.5, epsilon = 1e-4);
        }
    }

    #[test]
    fn pair_flux_and_photon_numbers() {
        for &d in &[0.75, 0.5] {
            let cfg = pair(d);
            let gen = build_generator(&cfg, None).unwrap();
            let rho0 = excited_register(2, &[0, 1]).unwrap();
            let times = grid(10.0 / GAMMA, 2000);
            let traj = evolve(&rho0, &gen, &times).unwrap();
            let left = output_flux(&traj, &cfg, Direction::Left).unwrap();
            let right = output_flux(&traj, &cfg, Direction::Right).unwrap();
            if d == 0.75 {
                assert_abs_diff_eq!(left[0] / GAMMA, 1.0, epsilon = 1e-9);
            } else {
                for (a, b) in left.iter().zip(&right) {
                    assert!((a - b).abs() < 1e-9 * GAMMA);
                }
            }
            for dir in [Direction::Left, Direction::Right] {
                let n = integrated_photon_number(&traj, &cfg, dir).unwrap();
                assert_abs_diff_eq!(n, 1.0, epsilon = 2e-3);
            }
        }
    }

    #[test]
    fn photon_number_needs_long_horizon() {
        let cfg = EmitterConfig::single_qubit(OMEGA, GAMMA);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(1, &[0]).unwrap();
        let traj = evolve(&rho0, &gen, &grid(5.0 / GAMMA, 50)).unwrap();
        assert!(matches!(
            integrated_photon_number(&traj, &cfg, Direction::Left),
            Err(Error::InsufficientTime { .. })
        ));
    }

    #[test]
    fn single_qubit_g1_is_analytic() {
        let cfg = EmitterConfig::single_qubit(OMEGA, GAMMA);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(1, &[0]).unwrap();
        let horizon = 10.0 / GAMMA;
        for &(t, tau) in &[(0.0, 0.0), (0.5, 1.0), (1.3, 0.2), (2.0, 3.0)] {
            let (t, tau) = (t / GAMMA, tau / GAMMA);
            let g = two_time_g1(&gen, &cfg, &rho0, Direction::Right, t, tau, horizon).unwrap();
            let want = 0.5 * (-GAMMA * t).exp() * (-0.5 * GAMMA * tau).exp();
            assert_abs_diff_eq!(g.re / GAMMA, want, epsilon = 1e-6);
            assert_abs_diff_eq!(g.im / GAMMA, 0.0, epsilon = 1e-6);
        }
        assert!(matches!(
            two_time_g1(&gen, &cfg, &rho0, Direction::Left, 6.0 / GAMMA, 5.0 / GAMMA, horizon),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn g1_at_zero_delay_is_flux() {
        let cfg = pair(0.5);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        let t = 0.7 / GAMMA;
        let traj = evolve(&rho0, &gen, &[0.0, t]).unwrap();
        let flux = output_flux(&traj, &cfg, Direction::Left).unwrap()[1];
        let g = two_time_g1(&gen, &cfg, &rho0, Direction::Left, t, 0.0, 1.0 / GAMMA).unwrap();
        assert_abs_diff_eq!(g.re / GAMMA, flux / GAMMA, epsilon = 1e-9);
    }

    #[test]
    fn g1_of_uncoupled_pair_is_sum_of_single_emitters() {
        // Closed-form independent-emitter oracle: each excited emitter
        // contributes (γ/2) e^{-γt} e^{-γτ/2}, and interference terms vanish
        // because ⟨σ₊⁽¹⁾σ₋⁽²⁾⟩ stays zero without exchange.
        let cfg = pair(0.75);
        let gen = build_generator_with(&cfg, None, ExchangeTreatment::Neglected).unwrap();
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        for &(t, tau) in &[(0.2, 0.4), (1.0, 1.0), (0.5, 2.5)] {
            let (t, tau) = (t / GAMMA, tau / GAMMA);
            let g = two_time_g1(&gen, &cfg, &rho0, Direction::Left, t, tau, 10.0 / GAMMA).unwrap();
            let single = 0.5 * (-GAMMA * t).exp() * (-0.5 * GAMMA * tau).exp();
            assert_abs_diff_eq!(g.re / GAMMA, 2.0 * single, epsilon = 1e-6);
            assert_abs_diff_eq!(g.im / GAMMA, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cross_coincidences() {
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        let horizon = 10.0 / GAMMA;

        let half = pair(0.5);
        let gen = build_generator(&half, None).unwrap();
        let g2 = cross_coincidence_g2(&gen, &half, &rho0, horizon, 1000).unwrap();
        assert_abs_diff_eq!(g2, 0.5, epsilon = 5e-3);

        let quarter = pair(0.75);
        let gen = build_generator_with(&quarter, None, ExchangeTreatment::Neglected).unwrap();
        let g2 = cross_coincidence_g2(&gen, &quarter, &rho0, horizon, 1000).unwrap();
        assert_abs_diff_eq!(g2, 0.0, epsilon = 5e-3);

        // With exchange J = -γ/2 the |ee> cascade passes through a
        // superposition of single-excitation states that is not symmetric,
        // which gives 2·½·2J²/(γ² + 4J²) = 1/4.
        let gen = build_generator(&quarter, None).unwrap();
        let g2 = cross_coincidence_g2(&gen, &quarter, &rho0, horizon, 1000).unwrap();
        assert_abs_diff_eq!(g2, 0.25, epsilon = 5e-3);

        let single = EmitterConfig::single_qubit(OMEGA, GAMMA);
        let gen = build_generator(&single, None).unwrap();
        let one = excited_register(1, &[0]).unwrap();
        let g2 = cross_coincidence_g2(&gen, &single, &one, horizon, 200).unwrap();
        assert_eq!(g2, 0.0);
    }

    #[test]
    fn coincidence_requires_horizon() {
        let cfg = pair(0.5);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        assert!(cross_coincidence_g2(&gen, &cfg, &rho0, 2.0 / GAMMA, 100).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = pair(0.5);
        let gen = build_generator(&cfg, None).unwrap();
        let rho0 = excited_register(2, &[0, 1]).unwrap();
        let traj = evolve(&rho0, &gen, &grid(1.0 / GAMMA, 4)).unwrap();
        let csv = trajectory_csv(&traj, &cfg).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,p_e1,p_e2,flux_L,flux_R");
        assert_eq!(lines.len(), 6);
    }
}
