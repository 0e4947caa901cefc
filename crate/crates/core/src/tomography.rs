//! Density-matrix reconstruction from signal moments, and thermal fits of
//! the amplifier noise moments.

use std::fmt::Write as _;

use argmin::core::{CostFunction, Error as ArgminError, Executor, Gradient, State, TerminationReason, TerminationStatus};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Direction;
use crate::error::{Error, Result};
use crate::fock::{moment_operator, DensityMatrix, FockSpace, Operator, Powers, TwoModeState, C64};
use crate::moments::{MomentKind, MomentTable};

/// Floor on moment standard errors when forming inverse-variance weights,
/// and on the residual gate.
pub const MOMENT_ERROR_FLOOR: f64 = 1e-3;
/// Required duality-gap bound on `cost - min cost`, relative to
/// `max(cost, 1)`.
pub const GAP_TOL: f64 = 1e-4;
/// Iteration limit of the projected-gradient refinement.
pub const POLISH_MAX_ITERS: usize = 50_000;
/// Reconstructions whose rms residual exceeds this multiple of the moment
/// error level are rejected.
pub const RESIDUAL_GATE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    InverseVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MLEConfig {
    /// Fock truncation per mode of the reconstructed state.
    pub cutoff: usize,
    pub max_iters: u64,
    pub convergence_tol: f64,
    pub weighting: Weighting,
    pub restarts: usize,
    /// Seed for the random restart points.
    pub seed: u64,
}

impl Default for MLEConfig {
    fn default() -> Self {
        Self {
            cutoff: 3,
            max_iters: 5000,
            convergence_tol: 1e-12,
            weighting: Weighting::InverseVariance,
            restarts: 8,
            seed: 0,
        }
    }
}

impl MLEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff < 2 {
            return Err(Error::InvalidArgument("MLE cutoff must be ≥ 2".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidArgument("convergence tolerance must be > 0".into()));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument("need at least one restart and iteration".into()));
        }
        Ok(())
    }
}

/// Sparse moment operator with its target value and weight.
#[derive(Debug, Clone)]
struct Constraint {
    entries: Vec<(usize, usize, C64)>,
    target: C64,
    weight: f64,
}

#[derive(Debug, Clone)]
struct MomentCost {
    dim: usize,
    constraints: Vec<Constraint>,
}

impl MomentCost {
    /// Lower-triangular T from the real parameter vector: real diagonal,
    /// complex strictly-lower part.
    fn unpack(&self, x: &[f64]) -> Operator {
        let d = self.dim;
        let mut t = Operator::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            t[(i, i)] = C64::new(x[k], 0.0);
            k += 1;
        }
        for i in 0..d {
            for j in 0..i {
                t[(i, j)] = C64::new(x[k], x[k + 1]);
                k += 2;
            }
        }
        t
    }

    fn n_params(&self) -> usize {
        self.dim * self.dim
    }

    fn rho(&self, x: &[f64]) -> (Operator, Operator, f64) {
        let t = self.unpack(x);
        let a = t.adjoint() * &t;
        let tr = a.trace().re;
        (t, a, tr)
    }

    fn expectation(c: &Constraint, rho: &Operator) -> C64 {
        c.entries.iter().map(|&(i, j, v)| rho[(j, i)] * v).sum()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (_, a, tr) = self.rho(x);
        if !(tr > 0.0) {
            return f64::INFINITY;
        }
        let rho = a / C64::new(tr, 0.0);
        self.constraints
            .iter()
            .map(|c| c.weight * (Self::expectation(c, &rho) - c.target).norm_sqr())
            .sum()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let (t, a, tr) = self.rho(x);
        let d = self.dim;
        let rho = a / C64::new(tr, 0.0);
        // dC = Re Tr(dA B), B = (2/t) Σ w conj(r) (M - ⟨M⟩ I)
        let mut b = Operator::zeros(d, d);
        for c in &self.constraints {
            let m = Self::expectation(c, &rho);
            let coef = (m - c.target).conj() * (2.0 * c.weight / tr);
            for &(i, j, v) in &c.entries {
                b[(i, j)] += coef * v;
            }
            for k in 0..d {
                b[(k, k)] -= coef * m;
            }
        }
        let g = &t * (&b + b.adjoint());
        let mut out = Vec::with_capacity(self.n_params());
        for i in 0..d {
            out.push(g[(i, i)].re);
        }
        for i in 0..d {
            for j in 0..i {
                out.push(g[(i, j)].re);
                out.push(g[(i, j)].im);
            }
        }
        out
    }

    fn value_rho(&self, rho: &Operator) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.weight * (Self::expectation(c, rho) - c.target).norm_sqr())
            .sum()
    }

    /// Hermitian gradient `G` with `df = Re Tr(G dρ)`.
    fn grad_rho(&self, rho: &Operator) -> Operator {
        let mut g = Operator::zeros(self.dim, self.dim);
        for c in &self.constraints {
            let r = Self::expectation(c, rho) - c.target;
            for &(i, j, v) in &c.entries {
                g[(i, j)] += r.conj() * v * c.weight;
                g[(j, i)] += r * v.conj() * c.weight;
            }
        }
        g
    }

    /// Frank–Wolfe gap `Tr(Gρ) - λ_min(G)`, an upper bound on
    /// `f(ρ) - min f` over density matrices (f is convex in ρ).
    fn duality_gap(&self, rho: &Operator) -> f64 {
        let g = self.grad_rho(rho);
        let lin = inner(&g, rho);
        let lmin = hermitian_part(&g).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        (lin - lmin).max(0.0)
    }

    /// Accelerated projected gradient in ρ-space with backtracking and
    /// adaptive restart, stopped by the duality-gap certificate.
    fn polish(&self, start: Operator) -> (Operator, f64, f64) {
        let mut x = start;
        let mut fx = self.value_rho(&x);
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut lip = 1.0f64;
        let mut gap = self.duality_gap(&x);
        for k in 0..POLISH_MAX_ITERS {
            if gap <= GAP_TOL * fx.max(1.0) {
                break;
            }
            let g = self.grad_rho(&y);
            let fy = self.value_rho(&y);
            let (x_new, f_new) = loop {
                let cand = project_density(&(&y - &g * C64::new(1.0 / lip, 0.0)));
                let diff = &cand - &y;
                let f_cand = self.value_rho(&cand);
                let bound = fy + inner(&g, &diff) + 0.5 * lip * diff.norm_squared();
                if f_cand <= bound * (1.0 + 1e-14) + 1e-300 || lip > 1e300 {
                    break (cand, f_cand);
                }
                lip *= 2.0;
            };
            if f_new > fx {
                // momentum overshot: restart from the current iterate
                y = x.clone();
                t = 1.0;
                continue;
            }
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_new + (&x_new - &x) * C64::new((t - 1.0) / t_new, 0.0);
            x = x_new;
            fx = f_new;
            t = t_new;
            lip *= 0.95;
            if k % 10 == 9 {
                gap = self.duality_gap(&x);
            }
        }
        gap = self.duality_gap(&x);
        (x, fx, gap)
    }

    fn pack_random(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        (0..self.n_params()).map(|_| StandardNormal.sample(rng)).collect()
    }
}

/// `Re Tr(A† B)`.
fn inner(a: &Operator, b: &Operator) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

fn hermitian_part(a: &Operator) -> Operator {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

/// Euclidean projection onto `{ρ ⪰ 0, Tr ρ = 1}`: eigenvalues projected
/// onto the probability simplex.
fn project_density(a: &Operator) -> Operator {
    let eig = hermitian_part(a).symmetric_eigen();
    let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut sorted = lambda.clone();
    sorted.sort_by(|p, q| q.total_cmp(p));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let th = (cum - 1.0) / (k + 1) as f64;
        if v - th > 0.0 {
            theta = th;
        }
    }
    let d = a.nrows();
    let mut out = Operator::zeros(d, d);
    for (k, &l) in lambda.iter().enumerate() {
        let p = l - theta;
        if p > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += v * v.adjoint() * C64::new(p, 0.0);
        }
    }
    out
}

impl CostFunction for MomentCost {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, ArgminError> {
        Ok(self.value(x))
    }
}

impl Gradient for MomentCost {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Self::Param) -> std::result::Result<Vec<f64>, ArgminError> {
        Ok(self.grad(x))
    }
}

/// Outcome of a moment-matching reconstruction.
#[derive(Debug, Clone)]
pub struct MleResult {
    pub state: TwoModeState,
    /// Weighted cost at the optimum.
    pub cost: f64,
    /// Certified bound on `cost - min cost`.
    pub duality_gap: f64,
    /// Root-mean-square of |Tr(ρ̂M_i) - m_i| over the constraints.
    pub residual_rms: f64,
    /// Moment error level the residual is gated against.
    pub error_floor: f64,
    /// Restarts whose L-BFGS run met its own tolerance.
    pub restarts_converged: usize,
    /// Fraction of constraints reproduced within 3 standard errors
    /// (1 when no errors are available).
    pub within_three_sigma: f64,
}

impl MleResult {
    pub fn rho(&self) -> &DensityMatrix {
        self.state.rho()
    }
}

/// Reconstruct a two-mode density matrix from normally ordered signal
/// moments by weighted least squares over `ρ = T†T / Tr(T†T)`, taking the
/// best of several L-BFGS runs from random starting points.
pub fn mle_density_matrix(moments: &MomentTable, cfg: &MLEConfig) -> Result<MleResult> {
    cfg.validate()?;
    if moments.kind() != MomentKind::SignalA {
        return Err(Error::InvalidArgument("MLE needs signal moments".into()));
    }
    if moments.order() < 2 {
        return Err(Error::IncompleteTable(2));
    }
    let table = moments.truncate(2)?;
    let space = FockSpace::two_mode(cfg.cutoff)?;
    let dim = space.dim();
    let mut constraints = Vec::new();
    let mut sigmas = Vec::new();
    for (k, p) in table.indexing().iter().enumerate().skip(1) {
        let op = moment_operator(&space, p)?;
        let mut entries = Vec::new();
        for j in 0..dim {
            for i in 0..dim {
                let v = op[(i, j)];
                if v != C64::new(0.0, 0.0) {
                    entries.push((i, j, v));
                }
            }
        }
        let sigma = table.stderrs()[k];
        let weight = match cfg.weighting {
            Weighting::Uniform => 1.0,
            Weighting::InverseVariance => 1.0 / (sigma * sigma + MOMENT_ERROR_FLOOR * MOMENT_ERROR_FLOOR),
        };
        sigmas.push(sigma);
        constraints.push(Constraint {
            entries,
            target: table.entries()[k],
            weight,
        });
    }
    let problem = MomentCost { dim, constraints };

    let runs: Vec<Option<(Vec<f64>, f64, bool)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            rng.set_stream(restart as u64);
            let init = problem.pack_random(&mut rng);
            let solver = LBFGS::new(MoreThuenteLineSearch::new(), 20)
                .with_tolerance_grad(cfg.convergence_tol)
                .ok()?
                .with_tolerance_cost(cfg.convergence_tol)
                .ok()?;
            let res = Executor::new(problem.clone(), solver)
                .configure(|s| s.param(init).max_iters(cfg.max_iters))
                .run()
                .ok()?;
            let state = res.state();
            let converged = matches!(
                state.get_termination_status(),
                TerminationStatus::Terminated(TerminationReason::SolverConverged)
            );
            let best = state.get_best_param()?.clone();
            let cost = problem.value(&best);
            cost.is_finite().then_some((best, cost, converged))
        })
        .collect();

    let restarts_converged = runs.iter().flatten().filter(|r| r.2).count();
    let best = runs
        .into_iter()
        .flatten()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::NonConvergence("every restart failed".into()))?;
    // On rank-deficient optima the factored parametrization converges
    // sublinearly; finish in ρ-space where the problem is convex and the
    // duality gap certifies the minimum.
    let (_, a, tr) = problem.rho(&best.0);
    let (rho_opt, cost, duality_gap) = problem.polish(a / C64::new(tr, 0.0));
    if duality_gap > GAP_TOL * cost.max(1.0) {
        return Err(Error::NonConvergence(format!(
            "duality gap {duality_gap:.3e} above {:.1e} after refinement",
            GAP_TOL * cost.max(1.0)
        )));
    }
    let rho = DensityMatrix::clamped(rho_opt)?;
    let residuals: Vec<f64> = problem
        .constraints
        .iter()
        .map(|c| (MomentCost::expectation(c, rho.matrix()) - c.target).norm())
        .collect();
    let n = residuals.len() as f64;
    let residual_rms = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let sigma_rms = (sigmas.iter().map(|s| s * s).sum::<f64>() / n).sqrt();
    let error_floor = sigma_rms.max(MOMENT_ERROR_FLOOR);
    let within_three_sigma = if sigma_rms > 0.0 {
        residuals
            .iter()
            .zip(&sigmas)
            .filter(|(r, s)| **r <= 3.0 * **s)
            .count() as f64
            / n
    } else {
        1.0
    };
    if residual_rms > RESIDUAL_GATE * error_floor {
        return Err(Error::ResidualTooLarge {
            residual: residual_rms,
            limit: RESIDUAL_GATE * error_floor,
        });
    }
    Ok(MleResult {
        state: TwoModeState::new(space, rho)?,
        cost,
        duality_gap,
        residual_rms,
        error_floor,
        restarts_converged,
        within_three_sigma,
    })
}

/// Thermal model of one amplifier chain's added noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFitResult {
    pub n_noise: f64,
    pub eta: f64,
    pub residual: f64,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Fit `⟨hⁿ h†ⁿ⟩ = n! (n̄ + 1)ⁿ` to the diagonal noise moments of one side.
/// The minimizer is located as the root of the cost derivative by
/// safeguarded Newton iteration, so exact thermal data return n̄ to
/// rounding precision.
pub fn fit_noise_thermal(noise: &MomentTable, side: Direction) -> Result<NoiseFitResult> {
    if noise.kind() != MomentKind::NoiseH {
        return Err(Error::InvalidArgument("noise fit needs noise moments".into()));
    }
    let order = noise.order();
    if order < 2 {
        return Err(Error::IncompleteTable(2));
    }
    let at = |p: usize, q: usize| match side {
        Direction::Left => Powers::new(p, q, 0, 0),
        Direction::Right => Powers::new(0, 0, p, q),
    };
    // phase-sensitive moments must vanish for a thermal state
    for p in 0..=order {
        for q in 0..=order {
            if p == q {
                continue;
            }
            let v = noise.get(at(p, q))?;
            let s = noise.stderr(at(p, q))?;
            let scale = noise.get(at(p.max(q), p.max(q)))?.norm();
            if v.norm() > 6.0 * s + 1e-9 * scale.max(1.0) {
                return Err(Error::NotThermal(format!(
                    "phase-sensitive moment {:?} = {v} exceeds its error {s:e}",
                    at(p, q)
                )));
            }
        }
    }
    let data: Vec<(usize, f64, f64)> = (1..=order)
        .map(|n| {
            let m = noise.get(at(n, n)).map(|v| v.re)?;
            let s = noise.stderr(at(n, n))?;
            Ok((n, m, if s > 0.0 { 1.0 / (s * s) } else { 1.0 }))
        })
        .collect::<Result<_>>()?;
    let (m1, s1) = (data[0].1, noise.stderr(at(1, 1))?);
    if m1 < 1.0 - 5.0 * s1 - 1e-9 {
        return Err(Error::NotThermal(format!(
            "⟨h h†⟩ = {m1} is below the vacuum level"
        )));
    }
    // cost(x) = Σ w (n! xⁿ - m)², x = n̄ + 1
    let derivs = |x: f64| {
        let (mut d1, mut d2) = (0.0, 0.0);
        for &(n, m, w) in &data {
            let f = factorial(n);
            let nf = n as f64;
            let pred = f * x.powi(n as i32);
            let dp = f * nf * x.powi(n as i32 - 1);
            let ddp = if n >= 2 { f * nf * (nf - 1.0) * x.powi(n as i32 - 2) } else { 0.0 };
            d1 += 2.0 * w * (pred - m) * dp;
            d2 += 2.0 * w * (dp * dp + (pred - m) * ddp);
        }
        (d1, d2)
    };
    let mut x = m1.max(1.0);
    for _ in 0..200 {
        let (d1, d2) = derivs(x);
        let step = if d2 > 0.0 { d1 / d2 } else { d1.signum() * 0.1 * x };
        let next = (x - step).max(1.0);
        if (next - x).abs() <= 1e-15 * x {
            x = next;
            break;
        }
        x = next;
    }
    let residual = data
        .iter()
        .map(|&(n, m, _)| (factorial(n) * x.powi(n as i32) - m).powi(2))
        .sum::<f64>()
        .sqrt();
    let n_noise = x - 1.0;
    Ok(NoiseFitResult {
        n_noise,
        eta: 1.0 / (1.0 + n_noise),
        residual,
    })
}

#[derive(Serialize, Deserialize)]
struct RhoRecord {
    cutoff: usize,
    basis: Vec<String>,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

/// ρ̂ as JSON with basis labels `|n_L n_R⟩` and separate real/imaginary
/// matrices.
pub fn density_matrix_json(state: &TwoModeState) -> Result<String> {
    let space = state.space();
    let m = state.rho().matrix();
    let d = space.dim();
    let rec = RhoRecord {
        cutoff: space.cutoff(),
        basis: (0..d).map(|i| space.basis_label(i)).collect(),
        re: (0..d).map(|i| (0..d).map(|j| m[(i, j)].re).collect()).collect(),
        im: (0..d).map(|i| (0..d).map(|j| m[(i, j)].im).collect()).collect(),
    };
    Ok(serde_json::to_string_pretty(&rec)?)
}

/// CSV with one row per matrix element: `row,col,re,im`.
pub fn density_matrix_csv(state: &TwoModeState) -> String {
    let space = state.space();
    let m = state.rho().matrix();
    let mut out = String::from("row,col,re,im\n");
    for i in 0..space.dim() {
        for j in 0..space.dim() {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{:.9e}",
                space.basis_label(i),
                space.basis_label(j),
                m[(i, j)].re,
                m[(i, j)].im
            );
        }
    }
    out
}
