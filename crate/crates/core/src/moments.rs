//! Moment estimation and inversion for amplified heterodyne records.
//!
//! Amplified outcomes referred to the amplifier input, `S' = S/√G`, have
//! moments that mix the signal field `a` with the added-noise mode `h`:
//!
//! `⟨S'_L†ⁿ S'_Lᵐ S'_R†ᵏ S'_Rˡ⟩ = Σ C(n,w)C(m,x)C(k,y)C(l,z)
//!     ⟨a_L†ʷ a_Lˣ a_R†ʸ a_Rᶻ⟩ ⟨h_Lⁿ⁻ʷ h_L†ᵐ⁻ˣ h_Rᵏ⁻ʸ h_R†ˡ⁻ᶻ⟩`.
//!
//! Ordering moment tuples lexicographically makes this a unit lower
//! triangular system, solved by forward substitution.

use std::fmt::Write as _;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{PrepLabel, RecordBatch, SHARD_SIZE};
use crate::dynamics::Direction;
use crate::error::{Error, Result};
use crate::fock::{Operator, Powers, C64};

/// Default moment order: powers 0..=2 per operator, i.e. up to fourth order.
pub const DEFAULT_ORDER: usize = 2;

/// Tolerance on the unit diagonal of H.
const DIAGONAL_TOL: f64 = 1e-12;

/// Bijection between moment tuples `(w,x,y,z)`, each component `≤ N`, and
/// flat indices `((w(N+1) + x)(N+1) + y)(N+1) + z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentIndexing {
    order: usize,
}

impl MomentIndexing {
    pub fn new(order: usize) -> Self {
        Self { order }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        (self.order + 1).pow(4)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, p: Powers) -> Result<usize> {
        if p.max_component() > self.order {
            return Err(Error::InvalidArgument(format!(
                "moment {p:?} exceeds order {}",
                self.order
            )));
        }
        let b = self.order + 1;
        Ok(((p.w * b + p.x) * b + p.y) * b + p.z)
    }

    pub fn powers(&self, index: usize) -> Powers {
        let b = self.order + 1;
        Powers::new(index / (b * b * b), (index / (b * b)) % b, (index / b) % b, index % b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Powers> + '_ {
        (0..self.len()).map(|i| self.powers(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    /// Moments of the input-referred records `S'`.
    SMeasured,
    /// Anti-normally ordered noise-mode moments `⟨hⁿ h†ᵐ …⟩`.
    NoiseH,
    /// Normally ordered signal moments `⟨a†ʷ aˣ …⟩`.
    SignalA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TableRecord", try_from = "TableRecord")]
pub struct MomentTable {
    order: usize,
    kind: MomentKind,
    entries: Vec<C64>,
    stderr: Vec<f64>,
}

#[derive(Clone, Serialize, Deserialize)]
struct EntryRecord {
    w: usize,
    x: usize,
    y: usize,
    z: usize,
    re: f64,
    im: f64,
    stderr: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct TableRecord {
    order: usize,
    kind: MomentKind,
    entries: Vec<EntryRecord>,
}

impl From<MomentTable> for TableRecord {
    fn from(t: MomentTable) -> Self {
        let idx = t.indexing();
        TableRecord {
            order: t.order,
            kind: t.kind,
            entries: idx
                .iter()
                .zip(t.entries.iter().zip(&t.stderr))
                .map(|(p, (v, s))| EntryRecord {
                    w: p.w,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    re: v.re,
                    im: v.im,
                    stderr: *s,
                })
                .collect(),
        }
    }
}

impl TryFrom<TableRecord> for MomentTable {
    type Error = Error;

    fn try_from(rec: TableRecord) -> Result<Self> {
        let idx = MomentIndexing::new(rec.order);
        let mut entries = vec![None; idx.len()];
        let mut stderr = vec![0.0; idx.len()];
        for e in rec.entries {
            let i = idx.index(Powers::new(e.w, e.x, e.y, e.z))?;
            entries[i] = Some(C64::new(e.re, e.im));
            stderr[i] = e.stderr;
        }
        let entries: Option<Vec<C64>> = entries.into_iter().collect();
        Self::new(
            rec.order,
            rec.kind,
            entries.ok_or(Error::IncompleteTable(rec.order))?,
            stderr,
        )
    }
}

impl MomentTable {
    /// Table from flat entries; entry `(0,0,0,0)` must be exactly 1.
    pub fn new(order: usize, kind: MomentKind, entries: Vec<C64>, stderr: Vec<f64>) -> Result<Self> {
        let n = MomentIndexing::new(order).len();
        if entries.len() != n {
            return Err(Error::IncompleteTable(order));
        }
        if stderr.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: stderr.len(),
            });
        }
        if entries[0] != C64::new(1.0, 0.0) {
            return Err(Error::InvalidArgument(format!(
                "moment (0,0,0,0) must be 1, found {}",
                entries[0]
            )));
        }
        Ok(Self {
            order,
            kind,
            entries,
            stderr,
        })
    }

    /// Table built entry by entry from a function of the powers.
    pub fn from_fn(order: usize, kind: MomentKind, mut f: impl FnMut(Powers) -> C64) -> Result<Self> {
        let idx = MomentIndexing::new(order);
        let entries: Vec<C64> = idx
            .iter()
            .map(|p| if p == Powers::new(0, 0, 0, 0) { C64::new(1.0, 0.0) } else { f(p) })
            .collect();
        let n = entries.len();
        Self::new(order, kind, entries, vec![0.0; n])
    }

    /// Vacuum: every moment but the trivial one vanishes.
    pub fn vacuum(order: usize, kind: MomentKind) -> Self {
        Self::from_fn(order, kind, |_| C64::new(0.0, 0.0)).expect("consistent size")
    }

    /// Moments of independent thermal modes with occupations `n_l`, `n_r`.
    /// Normally ordered: `⟨a†ʷ aˣ⟩ = δ_wx w! n̄ʷ`; anti-normally ordered:
    /// `⟨hⁿ h†ᵐ⟩ = δ_nm n! (n̄ + 1)ⁿ`.
    pub fn thermal(order: usize, kind: MomentKind, n_l: f64, n_r: f64) -> Self {
        let shift = if kind == MomentKind::NoiseH { 1.0 } else { 0.0 };
        let single = |p: usize, q: usize, n: f64| {
            if p == q {
                factorial(p) * (n + shift).powi(p as i32)
            } else {
                0.0
            }
        };
        Self::from_fn(order, kind, |p| {
            C64::new(single(p.w, p.x, n_l) * single(p.y, p.z, n_r), 0.0)
        })
        .expect("consistent size")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn indexing(&self) -> MomentIndexing {
        MomentIndexing::new(self.order)
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn stderrs(&self) -> &[f64] {
        &self.stderr
    }

    pub fn get(&self, p: Powers) -> Result<C64> {
        Ok(self.entries[self.indexing().index(p)?])
    }

    pub fn stderr(&self, p: Powers) -> Result<f64> {
        Ok(self.stderr[self.indexing().index(p)?])
    }

    pub fn with_stderr(mut self, stderr: Vec<f64>) -> Result<Self> {
        if stderr.len() != self.entries.len() {
            return Err(Error::DimensionMismatch {
                expected: self.entries.len(),
                got: stderr.len(),
            });
        }
        self.stderr = stderr;
        Ok(self)
    }

    /// Restrict to a lower order.
    pub fn truncate(&self, order: usize) -> Result<Self> {
        if order > self.order {
            return Err(Error::IncompleteTable(order));
        }
        let src = self.indexing();
        let dst = MomentIndexing::new(order);
        let picks: Vec<usize> = dst.iter().map(|p| src.index(p).expect("within order")).collect();
        Self::new(
            order,
            self.kind,
            picks.iter().map(|&i| self.entries[i]).collect(),
            picks.iter().map(|&i| self.stderr[i]).collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV `w,x,y,z,re,im,stderr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w,x,y,z,re,im,stderr\n");
        for (p, (v, s)) in self.indexing().iter().zip(self.entries.iter().zip(&self.stderr)) {
            let _ = writeln!(out, "{},{},{},{},{:.12e},{:.12e},{:.6e}", p.w, p.x, p.y, p.z, v.re, v.im, s);
        }
        out
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn dominated(p: Powers, q: Powers) -> bool {
    p.w <= q.w && p.x <= q.x && p.y <= q.y && p.z <= q.z
}

fn difference(q: Powers, p: Powers) -> Powers {
    Powers::new(q.w - p.w, q.x - p.x, q.y - p.y, q.z - p.z)
}

fn binomial_weight(q: Powers, p: Powers) -> f64 {
    binomial(q.w, p.w) * binomial(q.x, p.x) * binomial(q.y, p.y) * binomial(q.z, p.z)
}

/// Lower-triangular mixing matrix `H` with `S⃗ = H a⃗`.
pub fn build_h_matrix(noise: &MomentTable, order: usize) -> Result<Operator> {
    if noise.order() < order {
        return Err(Error::IncompleteTable(order));
    }
    let idx = MomentIndexing::new(order);
    let n = idx.len();
    let mut h = Operator::zeros(n, n);
    for row in 0..n {
        let q = idx.powers(row);
        for col in 0..=row {
            let p = idx.powers(col);
            if dominated(p, q) {
                h[(row, col)] = noise.get(difference(q, p))? * binomial_weight(q, p);
            }
        }
    }
    Ok(h)
}

/// H as CSV of `row_index,col_index,re,im` for non-zero entries.
pub fn h_matrix_csv(h: &Operator) -> String {
    let mut out = String::from("row,col,re,im\n");
    for j in 0..h.ncols() {
        for i in 0..h.nrows() {
            let v = h[(i, j)];
            if v != C64::new(0.0, 0.0) {
                let _ = writeln!(out, "{i},{j},{:.12e},{:.12e}", v.re, v.im);
            }
        }
    }
    out
}

/// Forward model: measured moments from signal and noise tables.
pub fn compose_moments(signal: &MomentTable, noise: &MomentTable) -> Result<MomentTable> {
    let order = signal.order();
    let h = build_h_matrix(noise, order)?;
    let a = DVector::from_column_slice(signal.entries());
    let s = h * a;
    MomentTable::new(order, MomentKind::SMeasured, s.iter().copied().collect(), vec![0.0; s.len()])
}

fn forward_substitute(h: &Operator, rhs: &[C64]) -> Result<Vec<C64>> {
    let n = rhs.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: h.nrows(),
        });
    }
    let mut x = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        let d = h[(i, i)];
        if (d - C64::new(1.0, 0.0)).norm() > DIAGONAL_TOL {
            return Err(Error::NonUnitDiagonal {
                index: i,
                value: d.to_string(),
            });
        }
        let mut acc = rhs[i];
        for j in 0..i {
            acc -= h[(i, j)] * x[j];
        }
        x[i] = acc;
    }
    Ok(x)
}

/// Solve `S⃗ = H a⃗` for the signal moments. The trivial moment is pinned
/// to exactly 1.
pub fn invert_moments(measured: &MomentTable, h: &Operator) -> Result<MomentTable> {
    let mut a = forward_substitute(h, measured.entries())?;
    if (a[0] - C64::new(1.0, 0.0)).norm() > 1e-12 {
        return Err(Error::InvalidArgument(format!("inverted trivial moment {}", a[0])));
    }
    a[0] = C64::new(1.0, 0.0);
    let n = a.len();
    MomentTable::new(measured.order(), MomentKind::SignalA, a, vec![0.0; n])
}

/// Noise moments from measured ground-state moments, removing the
/// contribution of a residual thermal signal with occupation `n_th` per mode
/// when given.
fn noise_from_ground(ground: &MomentTable, thermal_correction: Option<f64>) -> Result<MomentTable> {
    let order = ground.order();
    let entries = match thermal_correction {
        None => ground.entries().to_vec(),
        Some(n_th) => {
            if !(n_th >= 0.0) {
                return Err(Error::InvalidArgument(format!("thermal occupation {n_th}")));
            }
            // S(q) = Σ_{p ≤ q} C(q,p) a(p) h(q - p); a(0) = 1 so solve for h(q)
            // in increasing index order.
            let thermal = MomentTable::thermal(order, MomentKind::SignalA, n_th, n_th);
            let idx = ground.indexing();
            let mut h = vec![C64::new(0.0, 0.0); idx.len()];
            for i in 0..idx.len() {
                let q = idx.powers(i);
                let mut acc = ground.entries()[i];
                for j in 1..idx.len() {
                    let p = idx.powers(j);
                    if dominated(p, q) {
                        let a = thermal.entries()[j];
                        if a != C64::new(0.0, 0.0) {
                            acc -= a * binomial_weight(q, p) * h[idx.index(difference(q, p))?];
                        }
                    }
                }
                h[i] = acc;
            }
            h[0] = C64::new(1.0, 0.0);
            h
        }
    };
    MomentTable::new(order, MomentKind::NoiseH, entries, ground.stderrs().to_vec())
}

/// Minimum number of jackknife shards a batch is split into.
pub const MIN_SHARDS: usize = 32;

/// Raw per-shard sums of `S_L*ⁿ S_Lᵐ S_R*ᵏ S_Rˡ`, kept unscaled so that the
/// input-referred moments can be formed for any trial gain.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    order: usize,
    label: PrepLabel,
    gains: [f64; 2],
    shard_sums: Vec<Vec<C64>>,
    shard_counts: Vec<usize>,
}

impl MomentAccumulator {
    pub fn from_batch(batch: &RecordBatch, order: usize) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let idx = MomentIndexing::new(order);
        let levels = order + 1;
        // small batches still get enough shards for jackknife errors
        let shard = SHARD_SIZE.min(batch.len().div_ceil(MIN_SHARDS)).max(1);
        let chunks: Vec<_> = batch.records.chunks(shard).collect();
        let shard_sums: Vec<Vec<C64>> = chunks
            .par_iter()
            .map(|chunk| {
                let mut sums = vec![C64::new(0.0, 0.0); idx.len()];
                let mut pl = vec![C64::new(1.0, 0.0); levels];
                let mut pr = vec![C64::new(1.0, 0.0); levels];
                let mut pl_c = vec![C64::new(1.0, 0.0); levels];
                let mut pr_c = vec![C64::new(1.0, 0.0); levels];
                for r in chunk.iter() {
                    for k in 1..levels {
                        pl[k] = pl[k - 1] * r.s_l;
                        pr[k] = pr[k - 1] * r.s_r;
                        pl_c[k] = pl_c[k - 1] * r.s_l.conj();
                        pr_c[k] = pr_c[k - 1] * r.s_r.conj();
                    }
                    let mut i = 0;
                    for w in 0..levels {
                        for x in 0..levels {
                            let left = pl_c[w] * pl[x];
                            for y in 0..levels {
                                let mid = left * pr_c[y];
                                for z in 0..levels {
                                    sums[i] += mid * pr[z];
                                    i += 1;
                                }
                            }
                        }
                    }
                }
                sums
            })
            .collect();
        Ok(Self {
            order,
            label: batch.prep_label,
            gains: [batch.params.gain_l, batch.params.gain_r],
            shard_sums,
            shard_counts: chunks.iter().map(|c| c.len()).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn label(&self) -> PrepLabel {
        self.label
    }

    /// Gains recorded with the batch.
    pub fn gains(&self) -> [f64; 2] {
        self.gains
    }

    pub fn n_shots(&self) -> usize {
        self.shard_counts.iter().sum()
    }

    pub fn n_shards(&self) -> usize {
        self.shard_counts.len()
    }

    /// Multiply record phases by `e^{iθ_L}`, `e^{iθ_R}`; moment `(n,m,k,l)`
    /// acquires `e^{i θ_L (m-n) + i θ_R (l-k)}`.
    pub fn rotated(&self, theta_l: f64, theta_r: f64) -> Self {
        let idx = MomentIndexing::new(self.order);
        let phases: Vec<C64> = idx
            .iter()
            .map(|p| {
                C64::from_polar(
                    1.0,
                    theta_l * (p.x as f64 - p.w as f64) + theta_r * (p.z as f64 - p.y as f64),
                )
            })
            .collect();
        let mut out = self.clone();
        for sums in &mut out.shard_sums {
            for (s, ph) in sums.iter_mut().zip(&phases) {
                *s *= ph;
            }
        }
        out
    }

    fn scale_factors(&self, gains: [f64; 2]) -> Vec<f64> {
        MomentIndexing::new(self.order)
            .iter()
            .map(|p| gains[0].powf(-0.5 * (p.w + p.x) as f64) * gains[1].powf(-0.5 * (p.y + p.z) as f64))
            .collect()
    }

    fn mean_excluding(&self, skip: Option<usize>, scale: &[f64]) -> Vec<C64> {
        let n: usize = self.n_shots() - skip.map_or(0, |k| self.shard_counts[k]);
        let mut total = vec![C64::new(0.0, 0.0); scale.len()];
        for (k, sums) in self.shard_sums.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            for (t, s) in total.iter_mut().zip(sums) {
                *t += s;
            }
        }
        let mut mean: Vec<C64> = total
            .iter()
            .zip(scale)
            .map(|(t, f)| t * (f / n as f64))
            .collect();
        mean[0] = C64::new(1.0, 0.0);
        mean
    }

    /// Leave-one-shard-out replicates of the input-referred moments.
    pub fn jackknife_replicates(&self, gains: [f64; 2]) -> Vec<Vec<C64>> {
        let scale = self.scale_factors(gains);
        if self.n_shards() < 2 {
            return Vec::new();
        }
        (0..self.n_shards())
            .map(|k| self.mean_excluding(Some(k), &scale))
            .collect()
    }

    /// Input-referred moments at the given gains with jackknife errors.
    pub fn table_at(&self, gains: [f64; 2]) -> Result<MomentTable> {
        for g in gains {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidArgument(format!("gain {g}")));
            }
        }
        let scale = self.scale_factors(gains);
        let mean = self.mean_excluding(None, &scale);
        let stderr = jackknife_stderr(&self.jackknife_replicates(gains), mean.len());
        MomentTable::new(self.order, MomentKind::SMeasured, mean, stderr)
    }

    /// Input-referred moments at the recorded gains.
    pub fn table(&self) -> Result<MomentTable> {
        self.table_at(self.gains)
    }
}

/// Jackknife standard error of each component across replicates.
fn jackknife_stderr(replicates: &[Vec<C64>], len: usize) -> Vec<f64> {
    let k = replicates.len();
    if k < 2 {
        return vec![0.0; len];
    }
    (0..len)
        .map(|i| {
            let mean: C64 = replicates.iter().map(|r| r[i]).sum::<C64>() / k as f64;
            let ss: f64 = replicates.iter().map(|r| (r[i] - mean).norm_sqr()).sum();
            ((k - 1) as f64 / k as f64 * ss).sqrt()
        })
        .collect()
}

/// Input-referred moments `E[S'_L*ⁿ S'_Lᵐ S'_R*ᵏ S'_Rˡ]` with jackknife errors.
pub fn empirical_moments(batch: &RecordBatch, order: usize) -> Result<MomentTable> {
    MomentAccumulator::from_batch(batch, order)?.table()
}

/// Noise-mode moments from a ground-state batch.
pub fn noise_moments(
    ground_batch: &RecordBatch,
    order: usize,
    thermal_correction: Option<f64>,
) -> Result<MomentTable> {
    ground_batch.require_label(PrepLabel::Ground)?;
    let acc = MomentAccumulator::from_batch(ground_batch, order)?;
    noise_moments_from(&acc, acc.gains(), thermal_correction)
}

/// Noise moments from an accumulated ground batch, at explicit gains.
pub fn noise_moments_from(
    ground: &MomentAccumulator,
    gains: [f64; 2],
    thermal_correction: Option<f64>,
) -> Result<MomentTable> {
    if ground.label() != PrepLabel::Ground {
        return Err(Error::WrongPrepLabel {
            expected: PrepLabel::Ground.name().into(),
            got: ground.label().name().into(),
        });
    }
    noise_from_ground(&ground.table_at(gains)?, thermal_correction)
}

/// Signal moments with error bars combining the jackknife spread of the
/// signal batch and of the ground (noise) batch in quadrature.
pub fn invert_with_errors(
    signal: &MomentAccumulator,
    signal_gains: [f64; 2],
    ground: &MomentAccumulator,
    ground_gains: [f64; 2],
    thermal_correction: Option<f64>,
) -> Result<MomentTable> {
    let order = signal.order();
    let noise = noise_moments_from(ground, ground_gains, thermal_correction)?;
    let h = build_h_matrix(&noise, order)?;
    let measured = signal.table_at(signal_gains)?;
    let central = invert_moments(&measured, &h)?;
    let n = central.entries().len();

    let signal_reps: Vec<Vec<C64>> = signal
        .jackknife_replicates(signal_gains)
        .iter()
        .map(|rep| forward_substitute(&h, rep))
        .collect::<Result<_>>()?;
    let ground_reps: Vec<Vec<C64>> = ground
        .jackknife_replicates(ground_gains)
        .into_iter()
        .map(|rep| {
            let table = MomentTable::new(ground.order(), MomentKind::SMeasured, rep, vec![0.0; n_for(ground.order())])?;
            let noise = noise_from_ground(&table, thermal_correction)?;
            let h = build_h_matrix(&noise, order)?;
            forward_substitute(&h, measured.entries())
        })
        .collect::<Result<_>>()?;
    let es = jackknife_stderr(&signal_reps, n);
    let eg = jackknife_stderr(&ground_reps, n);
    let stderr = es.iter().zip(&eg).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    central.with_stderr(stderr)
}

fn n_for(order: usize) -> usize {
    MomentIndexing::new(order).len()
}

/// Moment tuples for `⟨a⟩` and `⟨a†a⟩` on one side.
fn calibration_powers(side: Direction) -> (Powers, Powers) {
    match side {
        Direction::Left => (Powers::new(0, 1, 0, 0), Powers::new(1, 1, 0, 0)),
        Direction::Right => (Powers::new(0, 0, 0, 1), Powers::new(0, 0, 1, 1)),
    }
}

/// Calibration residual `|⟨a⟩| - √2⟨a†a⟩` at trial gain `g` on one side.
pub fn calibration_residual(
    cal: &MomentAccumulator,
    noise: &MomentTable,
    side: Direction,
    g: f64,
) -> Result<f64> {
    let order = cal.order().min(2);
    let mut gains = cal.gains();
    match side {
        Direction::Left => gains[0] = g,
        Direction::Right => gains[1] = g,
    }
    let measured = cal.table_at(gains)?.truncate(order)?;
    let h = build_h_matrix(noise, order)?;
    let a = invert_moments(&measured, &h)?;
    let (first, second) = calibration_powers(side);
    Ok(a.get(first)?.norm() - std::f64::consts::SQRT_2 * a.get(second)?.re)
}

/// Calibration residual with the ground batch normalized at the same trial
/// gain as the calibration batch, so that no prior gain knowledge enters:
/// both input-referred tables scale together and the root sits at the true
/// gain.
pub fn joint_calibration_residual(
    cal: &MomentAccumulator,
    ground: &MomentAccumulator,
    side: Direction,
    g: f64,
    thermal_correction: Option<f64>,
) -> Result<f64> {
    let mut gains = ground.gains();
    match side {
        Direction::Left => gains[0] = g,
        Direction::Right => gains[1] = g,
    }
    let noise = noise_moments_from(ground, gains, thermal_correction)?;
    calibration_residual(cal, &noise.truncate(cal.order().min(2))?, side, g)
}

/// Gain of one chain from a calibration batch and a ground batch taken
/// through the same chain, by bisection on `ln G` over `bracket`.
pub fn calibrate_gain_joint(
    cal: &MomentAccumulator,
    ground: &MomentAccumulator,
    side: Direction,
    thermal_correction: Option<f64>,
    bracket: (f64, f64),
) -> Result<f64> {
    if cal.label() != PrepLabel::Calibration {
        return Err(Error::WrongPrepLabel {
            expected: PrepLabel::Calibration.name().into(),
            got: cal.label().name().into(),
        });
    }
    if ground.label() != PrepLabel::Ground {
        return Err(Error::WrongPrepLabel {
            expected: PrepLabel::Ground.name().into(),
            got: ground.label().name().into(),
        });
    }
    bisect_log(bracket, |g| joint_calibration_residual(cal, ground, side, g, thermal_correction))
}

/// First sign change of `f` scanning `bracket` upward in `ln G` at four
/// points per decade, refined by bisection to absolute tolerance 1e-6 in
/// `ln G`. Scanning rather than bisecting the whole bracket keeps the
/// physical root when a residual thermal correction adds a spurious one at
/// gains far above the true value.
fn bisect_log(bracket: (f64, f64), f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidArgument("invalid gain bracket".into()));
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let n_scan = ((lhi - llo) / std::f64::consts::LN_10 * 4.0).ceil().max(1.0) as usize;
    let mut prev = (llo, f(lo)?);
    let mut found = None;
    for k in 1..=n_scan {
        let x = llo + (lhi - llo) * k as f64 / n_scan as f64;
        let fx = f(x.exp())?;
        if !prev.1.is_finite() || !fx.is_finite() {
            prev = (x, fx);
            continue;
        }
        if fx == 0.0 {
            return Ok(x.exp());
        }
        if prev.1.signum() != fx.signum() {
            found = Some((prev, (x, fx)));
            break;
        }
        prev = (x, fx);
    }
    let ((mut a, mut fa), (mut b, _)) = found.ok_or(Error::NoBracket { lo, hi })?;
    while b - a > 1e-6 {
        let m = 0.5 * (a + b);
        let fm = f(m.exp())?;
        if fm == 0.0 {
            return Ok(m.exp());
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok((0.5 * (a + b)).exp())
}

/// Default search bracket for the gain.
pub const GAIN_BRACKET: (f64, f64) = (1.0, 1e12);

/// Gain of one chain from a batch of the single-emitter calibration state
/// `(|g⟩ + |e⟩)/√2`, for which `⟨a⟩ = √2 ⟨a†a⟩`. Bisection on `ln G` to
/// relative tolerance 1e-6.
pub fn calibrate_gain(
    cal_batch: &RecordBatch,
    noise: &MomentTable,
    side: Direction,
) -> Result<f64> {
    cal_batch.require_label(PrepLabel::Calibration)?;
    let acc = MomentAccumulator::from_batch(cal_batch, 2)?;
    calibrate_gain_in(&acc, noise, side, GAIN_BRACKET)
}

pub fn calibrate_gain_in(
    cal: &MomentAccumulator,
    noise: &MomentTable,
    side: Direction,
    bracket: (f64, f64),
) -> Result<f64> {
    if cal.label() != PrepLabel::Calibration {
        return Err(Error::WrongPrepLabel {
            expected: PrepLabel::Calibration.name().into(),
            got: cal.label().name().into(),
        });
    }
    // relative tolerance 1e-6 in G is an absolute tolerance in ln G
    bisect_log(bracket, |g| calibration_residual(cal, noise, side, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{sample_records, AmplifierChainParams, HeterodyneRecord};
    use crate::emission::{emitted_state, EmitterConfig, QubitPreparation, QubitState};
    use crate::fock::{expect_moment, TwoModeState};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Direct evaluation of the mixing sum, without building H.
    fn compose_oracle(a: &MomentTable, h: &MomentTable) -> Vec<C64> {
        let idx = a.indexing();
        idx.iter()
            .map(|q| {
                let mut acc = c(0.0, 0.0);
                for w in 0..=q.w {
                    for x in 0..=q.x {
                        for y in 0..=q.y {
                            for z in 0..=q.z {
                                let p = Powers::new(w, x, y, z);
                                let coef = binomial(q.w, w) * binomial(q.x, x) * binomial(q.y, y) * binomial(q.z, z);
                                acc += a.get(p).unwrap() * h.get(difference(q, p)).unwrap() * coef;
                            }
                        }
                    }
                }
                acc
            })
            .collect()
    }

    fn noon_state(cutoff: usize) -> TwoModeState {
        emitted_state(&EmitterConfig::noon_device(), &QubitPreparation::all_excited(2), &[0, 1], cutoff).unwrap()
    }

    fn signal_table(state: &TwoModeState, order: usize) -> MomentTable {
        MomentTable::from_fn(order, MomentKind::SignalA, |p| expect_moment(state, p).unwrap()).unwrap()
    }

    fn deterministic_batch(records: Vec<(C64, C64)>, label: PrepLabel) -> RecordBatch {
        RecordBatch {
            records: records
                .into_iter()
                .enumerate()
                .map(|(i, (l, r))| HeterodyneRecord {
                    s_l: l,
                    s_r: r,
                    shot_index: i as u64,
                })
                .collect(),
            prep_label: label,
            seed: 0,
            params: AmplifierChainParams::symmetric(1.0, 0.0).unwrap(),
        }
    }

    #[test]
    fn indexing_is_lexicographic_and_dominance_ordered() {
        let idx = MomentIndexing::new(2);
        assert_eq!(idx.len(), 81);
        assert_eq!(idx.index(Powers::new(0, 0, 0, 1)).unwrap(), 1);
        assert_eq!(idx.index(Powers::new(1, 0, 0, 0)).unwrap(), 27);
        for i in 0..idx.len() {
            assert_eq!(idx.index(idx.powers(i)).unwrap(), i);
            for j in 0..idx.len() {
                if dominated(idx.powers(j), idx.powers(i)) {
                    assert!(j <= i);
                }
            }
        }
        assert!(idx.index(Powers::new(3, 0, 0, 0)).is_err());
    }

    #[test]
    fn deterministic_records() {
        let batch = deterministic_batch(vec![(c(1.0, 0.0), c(0.0, 0.0)); 10], PrepLabel::Signal);
        let t = empirical_moments(&batch, 2).unwrap();
        assert_eq!(t.get(Powers::new(1, 1, 0, 0)).unwrap(), c(1.0, 0.0));
        assert_eq!(t.get(Powers::new(0, 0, 1, 1)).unwrap(), c(0.0, 0.0));
        assert!(matches!(
            empirical_moments(&deterministic_batch(vec![], PrepLabel::Signal), 2),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn vacuum_noise_gives_identity() {
        let h = build_h_matrix(&MomentTable::vacuum(2, MomentKind::NoiseH), 2).unwrap();
        assert_eq!(h, Operator::identity(81, 81));
    }

    #[test]
    fn h_rows_match_binomial_structure() {
        let cval = c(0.3, -0.2);
        let noise = MomentTable::from_fn(2, MomentKind::NoiseH, |p| {
            if p == Powers::new(0, 0, 0, 1) {
                cval
            } else {
                c(0.0, 0.0)
            }
        })
        .unwrap();
        let h1 = build_h_matrix(&noise.truncate(1).unwrap(), 1).unwrap();
        let i1 = MomentIndexing::new(1);
        let row = i1.index(Powers::new(0, 0, 0, 1)).unwrap();
        assert_eq!(h1[(row, 0)], cval);
        assert_eq!(h1[(row, row)], c(1.0, 0.0));
        let h2 = build_h_matrix(&noise, 2).unwrap();
        let i2 = MomentIndexing::new(2);
        let r2 = i2.index(Powers::new(0, 0, 0, 2)).unwrap();
        let c1 = i2.index(Powers::new(0, 0, 0, 1)).unwrap();
        assert_eq!(h2[(r2, c1)], cval * 2.0);
        assert!(build_h_matrix(&noise.truncate(1).unwrap(), 2).is_err());
    }

    #[test]
    fn noon_round_trip_through_thermal_noise() {
        let a = signal_table(&noon_state(4), 2);
        let noise = MomentTable::thermal(2, MomentKind::NoiseH, 1.0, 1.0);
        let s = compose_moments(&a, &noise).unwrap();
        let oracle = compose_oracle(&a, &noise);
        for (x, y) in s.entries().iter().zip(&oracle) {
            assert!((x - y).norm() < 1e-12);
        }
        let h = build_h_matrix(&noise, 2).unwrap();
        let back = invert_moments(&s, &h).unwrap();
        for (x, y) in back.entries().iter().zip(a.entries()) {
            assert!((x - y).norm() < 1e-12);
        }
        assert_eq!(back.kind(), MomentKind::SignalA);
        assert_eq!(back.entries()[0], c(1.0, 0.0));
    }

    #[test]
    fn identity_inversion_and_corrupt_diagonal() {
        let a = signal_table(&noon_state(4), 2);
        let id = Operator::identity(81, 81);
        let mut s = a.clone();
        s.kind = MomentKind::SMeasured;
        assert_eq!(invert_moments(&s, &id).unwrap().entries(), a.entries());
        let mut bad = id.clone();
        bad[(5, 5)] = c(2.0, 0.0);
        assert!(matches!(invert_moments(&s, &bad), Err(Error::NonUnitDiagonal { index: 5, .. })));
    }

    #[test]
    fn thermal_tables() {
        let h = MomentTable::thermal(2, MomentKind::NoiseH, 1.0, 0.0);
        assert_eq!(h.get(Powers::new(1, 1, 0, 0)).unwrap(), c(2.0, 0.0));
        assert_eq!(h.get(Powers::new(2, 2, 0, 0)).unwrap(), c(8.0, 0.0));
        assert_eq!(h.get(Powers::new(0, 0, 2, 2)).unwrap(), c(2.0, 0.0));
        let a = MomentTable::thermal(2, MomentKind::SignalA, 0.5, 0.0);
        assert_eq!(a.get(Powers::new(2, 2, 0, 0)).unwrap(), c(0.5, 0.0));
        assert_eq!(a.get(Powers::new(1, 0, 0, 0)).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn json_round_trip() {
        let a = signal_table(&noon_state(4), 2).with_stderr(vec![0.01; 81]).unwrap();
        let text = a.to_json().unwrap();
        assert!(text.contains("\"kind\": \"signal_a\""));
        let back = MomentTable::from_json(&text).unwrap();
        assert_eq!(back, a);
        assert_eq!(a.to_csv().lines().count(), 82);
    }

    #[test]
    fn thermal_correction_shifts_second_moment_exactly() {
        let vac = TwoModeState::vacuum(2).unwrap();
        let params = AmplifierChainParams::symmetric(1.0, 1.0).unwrap();
        let ground = sample_records(&vac, &params, 50_000, 3, PrepLabel::Ground).unwrap();
        let plain = noise_moments(&ground, 2, None).unwrap();
        let corrected = noise_moments(&ground, 2, Some(0.006)).unwrap();
        let p = Powers::new(1, 1, 0, 0);
        let shift = corrected.get(p).unwrap() - plain.get(p).unwrap();
        assert_abs_diff_eq!(shift.re, -0.006, epsilon = 1e-12);
        assert_abs_diff_eq!(shift.im, 0.0, epsilon = 1e-12);
        let signal = deterministic_batch(vec![(c(1.0, 0.0), c(0.0, 0.0))], PrepLabel::Signal);
        assert!(matches!(noise_moments(&signal, 2, None), Err(Error::WrongPrepLabel { .. })));
    }

    #[test]
    fn noise_moments_of_thermal_and_vacuum_chains() {
        let vac = TwoModeState::vacuum(2).unwrap();
        let one = AmplifierChainParams::symmetric(1e4, 1.0).unwrap();
        let g = sample_records(&vac, &one, 1_000_000, 5, PrepLabel::Ground).unwrap();
        let t = noise_moments(&g, 2, None).unwrap();
        assert_abs_diff_eq!(t.get(Powers::new(1, 1, 0, 0)).unwrap().re, 2.0, epsilon = 0.02);
        let zero = AmplifierChainParams::symmetric(1.0, 0.0).unwrap();
        let g0 = sample_records(&vac, &zero, 1_000_000, 6, PrepLabel::Ground).unwrap();
        let t0 = noise_moments(&g0, 2, None).unwrap();
        assert_abs_diff_eq!(t0.get(Powers::new(1, 1, 0, 0)).unwrap().re, 1.0, epsilon = 0.01);
        assert_abs_diff_eq!(t0.get(Powers::new(2, 2, 0, 0)).unwrap().re, 2.0, epsilon = 0.05);
    }

    #[test]
    fn ground_batch_inverts_to_vacuum() {
        let vac = TwoModeState::vacuum(2).unwrap();
        let params = AmplifierChainParams::symmetric(1e4, 1.0).unwrap();
        let g1 = sample_records(&vac, &params, 300_000, 7, PrepLabel::Ground).unwrap();
        let g2 = sample_records(&vac, &params, 300_000, 8, PrepLabel::Ground).unwrap();
        let acc1 = MomentAccumulator::from_batch(&g1, 2).unwrap();
        // relabel the second ground batch as the "signal"
        let mut as_signal = g2.clone();
        as_signal.prep_label = PrepLabel::Signal;
        let acc2 = MomentAccumulator::from_batch(&as_signal, 2).unwrap();
        let a = invert_with_errors(&acc2, acc2.gains(), &acc1, acc1.gains(), None).unwrap();
        for (i, p) in a.indexing().iter().enumerate().skip(1) {
            let v = a.entries()[i];
            let e = a.stderrs()[i];
            assert!(e > 0.0);
            assert!(v.norm() < 3.0 * e, "{p:?}: {v} vs {e}");
        }
    }

    fn calibration_setup(gain: f64, n_noise: f64, shots: usize, seed: u64) -> (RecordBatch, MomentTable) {
        let cfg = EmitterConfig::single_qubit(2.0 * std::f64::consts::PI * 4.85e9, 1e6);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let prep = QubitPreparation(vec![QubitState::superposition(c(h, 0.0), c(h, 0.0)).unwrap()]);
        let state = emitted_state(&cfg, &prep, &[0], 2).unwrap();
        let params = AmplifierChainParams::symmetric(gain, n_noise).unwrap();
        let cal = sample_records(&state, &params, shots, seed, PrepLabel::Calibration).unwrap();
        let vac = TwoModeState::vacuum(2).unwrap();
        let ground = sample_records(&vac, &params, shots, seed + 1, PrepLabel::Ground).unwrap();
        (cal, noise_moments(&ground, 2, None).unwrap())
    }

    #[test]
    fn analytic_calibration_state_balances() {
        // ⟨a⟩ = 1/(2√2), ⟨a†a⟩ = 1/4 for the emitted calibration state
        let cfg = EmitterConfig::single_qubit(2.0 * std::f64::consts::PI * 4.85e9, 1e6);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let prep = QubitPreparation(vec![QubitState::superposition(c(h, 0.0), c(h, 0.0)).unwrap()]);
        let state = emitted_state(&cfg, &prep, &[0], 3).unwrap();
        let a1 = expect_moment(&state, Powers::new(0, 1, 0, 0)).unwrap();
        let a2 = expect_moment(&state, Powers::new(1, 1, 0, 0)).unwrap();
        assert_abs_diff_eq!(a1.norm(), 1.0 / (2.0 * 2f64.sqrt()), epsilon = 1e-12);
        assert_abs_diff_eq!(a2.re, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a1.norm() - 2f64.sqrt() * a2.re, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gain_calibration_recovers_generator_gain() {
        let (cal, noise) = calibration_setup(1e4, 1.0, 1_000_000, 31);
        for side in [Direction::Left, Direction::Right] {
            let g = calibrate_gain(&cal, &noise, side).unwrap();
            assert!((g / 1e4 - 1.0).abs() < 0.01, "{side:?}: {g}");
        }
        // bracketing property around a mis-set gain
        let acc = MomentAccumulator::from_batch(&cal, 2).unwrap();
        let lo = calibration_residual(&acc, &noise, Direction::Left, 1e4 / 4.0).unwrap();
        let hi = calibration_residual(&acc, &noise, Direction::Left, 4e4).unwrap();
        assert!(lo.signum() != hi.signum());
        assert!(matches!(
            calibrate_gain_in(&acc, &noise, Direction::Left, (3e4, 1e6)),
            Err(Error::NoBracket { .. })
        ));
    }

    #[test]
    fn joint_calibration_needs_no_prior_gain() {
        let params = AmplifierChainParams::new(3e3, 2e5, 1.0, 1.0).unwrap();
        let cfg = EmitterConfig::single_qubit(2.0 * std::f64::consts::PI * 4.85e9, 1e6);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let prep = QubitPreparation(vec![QubitState::superposition(c(h, 0.0), c(h, 0.0)).unwrap()]);
        let state = emitted_state(&cfg, &prep, &[0], 2).unwrap();
        let cal = sample_records(&state, &params, 1_000_000, 5, PrepLabel::Calibration).unwrap();
        let ground = sample_records(&TwoModeState::thermal(2, 0.006).unwrap(), &params, 1_000_000, 6, PrepLabel::Ground).unwrap();
        let cal = MomentAccumulator::from_batch(&cal, 2).unwrap();
        let ground = MomentAccumulator::from_batch(&ground, 2).unwrap();
        let gl = calibrate_gain_joint(&cal, &ground, Direction::Left, Some(0.006), GAIN_BRACKET).unwrap();
        let gr = calibrate_gain_joint(&cal, &ground, Direction::Right, Some(0.006), GAIN_BRACKET).unwrap();
        // with the noise level itself estimated at the trial gain, the
        // shot-noise spread of G is ~3% at 10⁶ shots and n_noise = 1
        assert!((gl / 3e3 - 1.0).abs() < 0.1, "{gl}");
        assert!((gr / 2e5 - 1.0).abs() < 0.1, "{gr}");
        assert!(calibrate_gain_joint(&ground, &cal, Direction::Left, None, GAIN_BRACKET).is_err());
    }

    #[test]
    fn tables_serialize_through_serde() {
        let t = MomentTable::thermal(2, MomentKind::NoiseH, 0.5, 1.5);
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["kind"], "noise_h");
        let back: MomentTable = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn random_tables_round_trip(vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 160)) {
            let signal = MomentTable::from_fn(2, MomentKind::SignalA, |p| {
                let i = MomentIndexing::new(2).index(p).unwrap();
                c(vals[i].0, vals[i].1)
            }).unwrap();
            let noise = MomentTable::from_fn(2, MomentKind::NoiseH, |p| {
                let i = MomentIndexing::new(2).index(p).unwrap() + 79;
                c(vals[i].0, vals[i].1)
            }).unwrap();
            let s = compose_moments(&signal, &noise).unwrap();
            let h = build_h_matrix(&noise, 2).unwrap();
            for i in 0..h.nrows() {
                for j in i + 1..h.ncols() {
                    prop_assert_eq!(h[(i, j)], c(0.0, 0.0));
                }
            }
            let back = invert_moments(&s, &h).unwrap();
            // rounding in the composed table sets the attainable precision
            let scale = s.entries().iter().map(|v| v.norm()).fold(1.0, f64::max);
            for (x, y) in back.entries().iter().zip(signal.entries()) {
                prop_assert!((x - y).norm() < 1e-12 * scale, "{} vs {} (scale {})", x, y, scale);
            }
        }

        #[test]
        fn phase_rotation_preserves_inverted_moduli(theta_l in 0.0f64..6.28, theta_r in 0.0f64..6.28) {
            let state = noon_state(3);
            let params = AmplifierChainParams::symmetric(10.0, 0.5).unwrap();
            let sig = sample_records(&state, &params, 20_000, 41, PrepLabel::Signal).unwrap();
            let vac = TwoModeState::vacuum(2).unwrap();
            let gr = sample_records(&vac, &params, 20_000, 42, PrepLabel::Ground).unwrap();
            let s_acc = MomentAccumulator::from_batch(&sig, 2).unwrap();
            let g_acc = MomentAccumulator::from_batch(&gr, 2).unwrap();
            let h = build_h_matrix(&noise_moments_from(&g_acc, g_acc.gains(), None).unwrap(), 2).unwrap();
            let base = invert_moments(&s_acc.table().unwrap(), &h).unwrap();
            // rotate both the signal and the noise records: the noise is phase
            // insensitive, so the rotated ground batch is equally valid
            let hr = build_h_matrix(
                &noise_moments_from(&g_acc.rotated(theta_l, theta_r), g_acc.gains(), None).unwrap(), 2).unwrap();
            let rot = invert_moments(&s_acc.rotated(theta_l, theta_r).table().unwrap(), &hr).unwrap();
            for (x, y) in base.entries().iter().zip(rot.entries()) {
                prop_assert!((x.norm() - y.norm()).abs() < 1e-9 * (1.0 + x.norm()));
            }
        }
    }
}
