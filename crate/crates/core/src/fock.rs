//! Truncated Fock-space and qubit-register linear algebra.
//!
//! Two-mode basis states are written `|n_L n_R>` and stored with `n_R`
//! varying fastest: `index = n_L * (cutoff + 1) + n_R`. Every module in the
//! crate uses this layout. Qubit registers use `|g> = 0`, `|e> = 1`, with the
//! first qubit as the most significant tensor factor.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type Operator = DMatrix<C64>;
pub type StateVector = DVector<C64>;

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = -1e-8;

/// Populations below this are treated as unoccupied by the cutoff guard.
const OCCUPATION_EPS: f64 = 1e-10;

pub(crate) fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub(crate) fn r(re: f64) -> C64 {
    C64::new(re, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockSpace {
    cutoff: usize,
    n_modes: usize,
}

impl FockSpace {
    pub fn new(cutoff: usize, n_modes: usize) -> Result<Self> {
        if cutoff < 1 || n_modes < 1 {
            return Err(Error::InvalidArgument(format!(
                "fock space needs cutoff >= 1 and n_modes >= 1 (got {cutoff}, {n_modes})"
            )));
        }
        Ok(Self { cutoff, n_modes })
    }

    /// Two-mode (left, right) space used for the photonic fields.
    pub fn two_mode(cutoff: usize) -> Result<Self> {
        Self::new(cutoff, 2)
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn levels(&self) -> usize {
        self.cutoff + 1
    }

    pub fn dim(&self) -> usize {
        self.levels().pow(self.n_modes as u32)
    }

    /// Flat index of an occupation-number tuple (last mode fastest).
    pub fn index(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.n_modes {
            return Err(Error::DimensionMismatch {
                expected: self.n_modes,
                got: occupations.len(),
            });
        }
        let mut idx = 0;
        for &n in occupations {
            if n > self.cutoff {
                return Err(Error::CutoffTooSmall {
                    cutoff: self.cutoff,
                    occupied: n,
                    power: 0,
                });
            }
            idx = idx * self.levels() + n;
        }
        Ok(idx)
    }

    pub fn occupations(&self, mut index: usize) -> Vec<usize> {
        let mut occ = vec![0; self.n_modes];
        for slot in occ.iter_mut().rev() {
            *slot = index % self.levels();
            index /= self.levels();
        }
        occ
    }

    pub fn basis_label(&self, index: usize) -> String {
        let occ = self.occupations(index);
        let digits: Vec<String> = occ.iter().map(|n| n.to_string()).collect();
        format!("|{}>", digits.join(""))
    }

    /// Basis ket `|n_L n_R ...>`.
    pub fn ket(&self, occupations: &[usize]) -> Result<StateVector> {
        let mut v = StateVector::zeros(self.dim());
        v[self.index(occupations)?] = r(1.0);
        Ok(v)
    }

    pub fn vacuum(&self) -> StateVector {
        let mut v = StateVector::zeros(self.dim());
        v[0] = r(1.0);
        v
    }
}

pub fn identity(dim: usize) -> Operator {
    Operator::identity(dim, dim)
}

/// Single-mode annihilation operator on `levels` Fock states.
pub fn single_mode_annihilation(levels: usize) -> Operator {
    let mut a = Operator::zeros(levels, levels);
    for n in 1..levels {
        a[(n - 1, n)] = r((n as f64).sqrt());
    }
    a
}

/// Kronecker product; `(A ⊗ B)[(i·dB + k, j·dB + l)] = A[(i,j)]·B[(k,l)]`.
pub fn tensor(a: &Operator, b: &Operator) -> Operator {
    a.kronecker(b)
}

/// Annihilation operator of `mode`, identity on the other modes.
pub fn annihilation(space: &FockSpace, mode: usize) -> Result<Operator> {
    if mode >= space.n_modes() {
        return Err(Error::ModeOutOfRange {
            mode,
            n_modes: space.n_modes(),
        });
    }
    let levels = space.levels();
    let mut op = Operator::identity(1, 1);
    for m in 0..space.n_modes() {
        let factor = if m == mode {
            single_mode_annihilation(levels)
        } else {
            identity(levels)
        };
        op = tensor(&op, &factor);
    }
    Ok(op)
}

pub fn creation(space: &FockSpace, mode: usize) -> Result<Operator> {
    Ok(annihilation(space, mode)?.adjoint())
}

pub fn number(space: &FockSpace, mode: usize) -> Result<Operator> {
    let a = annihilation(space, mode)?;
    Ok(a.adjoint() * a)
}

pub fn matrix_power(op: &Operator, k: usize) -> Operator {
    let mut out = identity(op.nrows());
    for _ in 0..k {
        out = &out * op;
    }
    out
}

// Qubit operators in the {|g>, |e>} basis.

pub fn sigma_minus() -> Operator {
    Operator::from_row_slice(2, 2, &[r(0.0), r(1.0), r(0.0), r(0.0)])
}

pub fn sigma_plus() -> Operator {
    sigma_minus().adjoint()
}

pub fn sigma_x() -> Operator {
    Operator::from_row_slice(2, 2, &[r(0.0), r(1.0), r(1.0), r(0.0)])
}

pub fn sigma_z() -> Operator {
    Operator::from_row_slice(2, 2, &[r(-1.0), r(0.0), r(0.0), r(1.0)])
}

/// Embed a single-qubit operator at position `qubit` of an `n`-qubit register.
pub fn qubit_operator(single: &Operator, qubit: usize, n_qubits: usize) -> Result<Operator> {
    if qubit >= n_qubits {
        return Err(Error::ModeOutOfRange {
            mode: qubit,
            n_modes: n_qubits,
        });
    }
    let mut op = Operator::identity(1, 1);
    for q in 0..n_qubits {
        op = if q == qubit {
            tensor(&op, single)
        } else {
            tensor(&op, &identity(2))
        };
    }
    Ok(op)
}

/// Exponents of a two-mode normally ordered moment
/// `<a_L†^w a_L^x a_R†^y a_R^z>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Powers {
    pub w: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Powers {
    pub const fn new(w: usize, x: usize, y: usize, z: usize) -> Self {
        Self { w, x, y, z }
    }

    /// Powers of the Hermitian-conjugate moment.
    pub fn conjugate(&self) -> Self {
        Self::new(self.x, self.w, self.z, self.y)
    }

    pub fn max_component(&self) -> usize {
        self.w.max(self.x).max(self.y).max(self.z)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// The operator `a_L†^w a_L^x a_R†^y a_R^z` on a two-mode space.
pub fn moment_operator(space: &FockSpace, p: Powers) -> Result<Operator> {
    if space.n_modes() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: space.n_modes(),
        });
    }
    let a = single_mode_annihilation(space.levels());
    let ad = a.adjoint();
    let left = matrix_power(&ad, p.w) * matrix_power(&a, p.x);
    let right = matrix_power(&ad, p.y) * matrix_power(&a, p.z);
    Ok(tensor(&left, &right))
}

/// Hermitian, unit-trace, positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: Operator,
}

impl DensityMatrix {
    /// Validate a matrix against the density-matrix invariants.
    pub fn new(matrix: Operator) -> Result<Self> {
        check_density(&matrix)?;
        Ok(Self { matrix })
    }

    /// Hermitize, clamp eigenvalues within tolerance to zero and renormalize.
    /// Eigenvalues below the tolerance are an error.
    pub fn clamped(matrix: Operator) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidDensityMatrix("not square".into()));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidDensityMatrix("non-finite entry".into()));
        }
        let herm = (&matrix + matrix.adjoint()) * r(0.5);
        let eig = herm.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < POSITIVITY_TOL {
            return Err(Error::InvalidDensityMatrix(format!(
                "eigenvalue {min:e} below tolerance"
            )));
        }
        let rebuilt = if min < 0.0 {
            let vals = eig.eigenvalues.map(|v| r(v.max(0.0)));
            &eig.eigenvectors * Operator::from_diagonal(&vals) * eig.eigenvectors.adjoint()
        } else {
            herm
        };
        let tr = rebuilt.trace().re;
        if tr <= 0.0 {
            return Err(Error::InvalidDensityMatrix("zero trace".into()));
        }
        let rebuilt = rebuilt / r(tr);
        let rebuilt = (&rebuilt + rebuilt.adjoint()) * r(0.5);
        Ok(Self { matrix: rebuilt })
    }

    /// Projector onto a (normalized on the fly) state vector.
    pub fn from_pure(psi: &StateVector) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidDensityMatrix("zero or non-finite state".into()));
        }
        let psi = psi / r(norm);
        let m = &psi * psi.adjoint();
        Ok(Self {
            matrix: (&m + m.adjoint()) * r(0.5),
        })
    }

    pub fn matrix(&self) -> &Operator {
        &self.matrix
    }

    pub fn into_matrix(self) -> Operator {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn population(&self, index: usize) -> f64 {
        self.matrix[(index, index)].re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.matrix
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .collect()
    }

    /// `p·self + (1-p)·other`.
    pub fn mix(&self, other: &DensityMatrix, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(Self {
            matrix: &self.matrix * r(p) + &other.matrix * r(1.0 - p),
        })
    }

    /// Expectation value `Tr(ρ O)`.
    pub fn expect(&self, op: &Operator) -> Result<C64> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: op.nrows(),
            });
        }
        Ok(trace_product(&self.matrix, op))
    }
}

/// `Tr(A B)` without forming the product.
pub fn trace_product(a: &Operator, b: &Operator) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

fn check_density(m: &Operator) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidDensityMatrix("not square".into()));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidDensityMatrix("non-finite entry".into()));
    }
    let herm_err = (m - m.adjoint()).camax();
    if herm_err > HERMITIAN_TOL {
        return Err(Error::InvalidDensityMatrix(format!(
            "not Hermitian (deviation {herm_err:e})"
        )));
    }
    let tr = m.trace();
    if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
        return Err(Error::InvalidDensityMatrix(format!("trace {tr}")));
    }
    let min = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < POSITIVITY_TOL {
        return Err(Error::InvalidDensityMatrix(format!(
            "negative eigenvalue {min:e}"
        )));
    }
    Ok(())
}

/// Density matrix of the left/right photonic modes together with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeState {
    space: FockSpace,
    rho: DensityMatrix,
}

impl TwoModeState {
    pub fn new(space: FockSpace, rho: DensityMatrix) -> Result<Self> {
        if space.n_modes() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: space.n_modes(),
            });
        }
        if rho.dim() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: rho.dim(),
            });
        }
        Ok(Self { space, rho })
    }

    pub fn pure(space: FockSpace, psi: &StateVector) -> Result<Self> {
        if psi.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: psi.len(),
            });
        }
        Self::new(space, DensityMatrix::from_pure(psi)?)
    }

    pub fn vacuum(cutoff: usize) -> Result<Self> {
        let space = FockSpace::two_mode(cutoff)?;
        Self::pure(space, &space.vacuum())
    }

    /// Product of single-mode thermal states with mean occupation `n_th`,
    /// truncated to the space and renormalized.
    pub fn thermal(cutoff: usize, n_th: f64) -> Result<Self> {
        if !(n_th >= 0.0) || !n_th.is_finite() {
            return Err(Error::InvalidArgument(format!("thermal occupation {n_th}")));
        }
        let space = FockSpace::two_mode(cutoff)?;
        let levels = space.levels();
        let single: Vec<f64> = (0..levels)
            .map(|n| n_th.powi(n as i32) / (1.0 + n_th).powi(n as i32 + 1))
            .collect();
        let mut m = Operator::zeros(space.dim(), space.dim());
        for nl in 0..levels {
            for nr in 0..levels {
                let i = nl * levels + nr;
                m[(i, i)] = r(single[nl] * single[nr]);
            }
        }
        let tr = m.trace();
        Self::new(space, DensityMatrix::new(m / tr)?)
    }

    pub fn space(&self) -> &FockSpace {
        &self.space
    }

    pub fn rho(&self) -> &DensityMatrix {
        &self.rho
    }

    pub fn population(&self, n_l: usize, n_r: usize) -> Result<f64> {
        Ok(self.rho.population(self.space.index(&[n_l, n_r])?))
    }

    /// Largest occupied photon number in each mode.
    pub fn max_occupation(&self) -> [usize; 2] {
        let mut max = [0usize; 2];
        for i in 0..self.space.dim() {
            if self.rho.population(i) > OCCUPATION_EPS {
                let occ = self.space.occupations(i);
                max[0] = max[0].max(occ[0]);
                max[1] = max[1].max(occ[1]);
            }
        }
        max
    }

    /// Same state in a space with a different cutoff. Shrinking is only
    /// allowed when no population is discarded.
    pub fn embed(&self, cutoff: usize) -> Result<Self> {
        let target = FockSpace::two_mode(cutoff)?;
        let occ = self.max_occupation();
        if occ[0] > cutoff || occ[1] > cutoff {
            return Err(Error::CutoffTooSmall {
                cutoff,
                occupied: occ[0].max(occ[1]),
                power: 0,
            });
        }
        let keep = self.space.cutoff().min(cutoff);
        let mut m = Operator::zeros(target.dim(), target.dim());
        for a in 0..self.space.dim() {
            let oa = self.space.occupations(a);
            if oa[0] > keep || oa[1] > keep {
                continue;
            }
            let ta = oa[0] * target.levels() + oa[1];
            for b in 0..self.space.dim() {
                let ob = self.space.occupations(b);
                if ob[0] > keep || ob[1] > keep {
                    continue;
                }
                let tb = ob[0] * target.levels() + ob[1];
                m[(ta, tb)] = self.rho.matrix()[(a, b)];
            }
        }
        Self::new(target, DensityMatrix::clamped(m)?)
    }
}

/// Ground-truth moment `Tr(ρ a_L†^w a_L^x a_R†^y a_R^z)` by dense products.
///
/// Fails when the cutoff leaves no headroom above the occupied photon
/// numbers for the requested powers.
pub fn expect_moment(state: &TwoModeState, p: Powers) -> Result<C64> {
    let cutoff = state.space().cutoff();
    let occ = state.max_occupation();
    for (occupied, power) in [(occ[0], p.w.max(p.x)), (occ[1], p.y.max(p.z))] {
        if occupied + power > cutoff {
            return Err(Error::CutoffTooSmall {
                cutoff,
                occupied,
                power,
            });
        }
    }
    let space = state.space();
    let a_l = annihilation(space, 0)?;
    let a_r = annihilation(space, 1)?;
    let op = matrix_power(&a_l.adjoint(), p.w)
        * matrix_power(&a_l, p.x)
        * matrix_power(&a_r.adjoint(), p.y)
        * matrix_power(&a_r, p.z);
    state.rho().expect(&op)
}

/// Trace-overlap fidelity `Tr(ρ σ)` against a pure target.
pub fn fidelity(rho: &DensityMatrix, target: &DensityMatrix) -> Result<f64> {
    if rho.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: rho.dim(),
        });
    }
    let purity = target.purity();
    if (purity - 1.0).abs() > 1e-6 {
        return Err(Error::TargetNotPure { purity });
    }
    let overlap = trace_product(rho.matrix(), target.matrix());
    debug_assert!(overlap.im.abs() < 1e-10);
    Ok(overlap.re)
}
