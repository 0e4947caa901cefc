//! Adaptive Dormand–Prince 5(4) integration of the master equation.

use crate::error::{Error, Result};
use crate::fock::{r, DensityMatrix, Operator};

use super::LindbladGenerator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    /// Largest |Tr ρ - 1| seen before per-step renormalization.
    pub max_trace_drift: f64,
}

impl Trajectory {
    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

// Dormand–Prince tableau (the generator is autonomous, so nodes are unused).
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Stepper<'a> {
    gen: &'a LindbladGenerator,
    tol: Tolerances,
    renormalize: bool,
    max_drift: f64,
}

impl Stepper<'_> {
    fn lincomb(y: &Operator, h: f64, terms: &[(f64, &Operator)]) -> Operator {
        let mut out = y.clone();
        for (coef, k) in terms {
            if *coef != 0.0 {
                out += *k * r(h * coef);
            }
        }
        out
    }

    /// Advance `y` from `t0` to `t1`, returning the new state and the last
    /// accepted step size.
    fn advance(&mut self, mut y: Operator, t0: f64, t1: f64, mut h: f64) -> Result<(Operator, f64)> {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok((y, h));
        }
        let mut t = t0;
        let h_min = 1e-14 * (t1.abs().max(span));
        h = h.min(span);
        let mut k1 = self.gen.apply(&y);
        while t < t1 {
            let last = t + h >= t1;
            let step = if last { t1 - t } else { h };
            let k2 = self.gen.apply(&Self::lincomb(&y, step, &[(A21, &k1)]));
            let k3 = self.gen.apply(&Self::lincomb(&y, step, &[(A31, &k1), (A32, &k2)]));
            let k4 = self
                .gen
                .apply(&Self::lincomb(&y, step, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
            let k5 = self.gen.apply(&Self::lincomb(
                &y,
                step,
                &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)],
            ));
            let k6 = self.gen.apply(&Self::lincomb(
                &y,
                step,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ));
            let y_new = Self::lincomb(
                &y,
                step,
                &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
            );
            let k7 = self.gen.apply(&y_new);
            let err_vec = Self::lincomb(
                &Operator::zeros(y.nrows(), y.ncols()),
                step,
                &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
            );
            let mut err: f64 = 0.0;
            for ((e, a), b) in err_vec.iter().zip(y.iter()).zip(y_new.iter()) {
                let scale = self.tol.atol + self.tol.rtol * a.norm().max(b.norm());
                err = err.max(e.norm() / scale);
            }
            if !err.is_finite() || y_new.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::NonFinite { t });
            }
            if err <= 1.0 {
                t = if last { t1 } else { t + step };
                y = y_new;
                k1 = k7;
                if self.renormalize {
                    let tr = y.trace();
                    self.max_drift = self.max_drift.max((tr.re - 1.0).abs());
                    y /= r(tr.re);
                    k1 = self.gen.apply(&y);
                }
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if !last {
                    h = step * factor;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                if h < h_min {
                    return Err(Error::StepUnderflow { t });
                }
            }
        }
        Ok((y, h))
    }
}

fn initial_step(gen: &LindbladGenerator) -> f64 {
    // inverse of the fastest rate in the generator
    let scale = gen.hamiltonian().camax()
        + gen
            .dissipators()
            .iter()
            .map(|(op, rate)| rate * op.camax().powi(2))
            .sum::<f64>();
    if scale > 0.0 {
        0.01 / scale
    } else {
        1.0
    }
}

/// Integrate any operator under the generator from `t0` to `t1`.
pub fn propagate(x: &Operator, gen: &LindbladGenerator, t0: f64, t1: f64) -> Result<Operator> {
    let mut stepper = Stepper {
        gen,
        tol: Tolerances::default(),
        renormalize: false,
        max_drift: 0.0,
    };
    let (y, _) = stepper.advance(x.clone(), t0, t1, initial_step(gen))?;
    Ok(y)
}

/// Integrate a density matrix, recording it at every time of `t_grid`.
pub fn evolve(rho0: &DensityMatrix, gen: &LindbladGenerator, t_grid: &[f64]) -> Result<Trajectory> {
    evolve_with(rho0, gen, t_grid, Tolerances::default())
}

pub fn evolve_with(
    rho0: &DensityMatrix,
    gen: &LindbladGenerator,
    t_grid: &[f64],
    tol: Tolerances,
) -> Result<Trajectory> {
    if rho0.dim() != gen.dim() {
        return Err(Error::DimensionMismatch {
            expected: gen.dim(),
            got: rho0.dim(),
        });
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("time grid must be non-empty and increasing".into()));
    }
    let mut stepper = Stepper {
        gen,
        tol,
        renormalize: true,
        max_drift: 0.0,
    };
    let mut h = initial_step(gen);
    let mut y = rho0.matrix().clone();
    let mut states = Vec::with_capacity(t_grid.len());
    let mut t_prev = t_grid[0];
    states.push(rho0.clone());
    for &t in &t_grid[1..] {
        let (next, h_next) = stepper.advance(y, t_prev, t, h)?;
        y = next;
        h = h_next;
        t_prev = t;
        // re-symmetrize rounding noise before validation
        let herm = (&y + y.adjoint()) * r(0.5);
        states.push(DensityMatrix::clamped(herm).map_err(|_| Error::NonFinite { t })?);
    }
    Ok(Trajectory {
        times: t_grid.to_vec(),
        states,
        max_trace_drift: stepper.max_drift,
    })
}

/// Propagator over a fixed step `h`, as a matrix on column-stacked operators,
/// assembled by integrating each basis element.
pub fn step_propagator(gen: &LindbladGenerator, h: f64) -> Result<Operator> {
    let d = gen.dim();
    let mut prop = Operator::zeros(d * d, d * d);
    for j in 0..d {
        for i in 0..d {
            let mut basis = Operator::zeros(d, d);
            basis[(i, j)] = r(1.0);
            let image = propagate(&basis, gen, 0.0, h)?;
            let col = j * d + i;
            for jj in 0..d {
                for ii in 0..d {
                    prop[(jj * d + ii, col)] = image[(ii, jj)];
                }
            }
        }
    }
    Ok(prop)
}
